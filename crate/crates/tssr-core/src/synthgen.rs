//! Deterministic synthetic dataset generator: items live in content
//! clusters, and a Markov walk makes the next item come from the current
//! item's cluster with probability `p_follow`. Cluster identity is
//! recoverable from the content vectors, so the content stream genuinely
//! predicts transitions while item IDs alone must memorize co-occurrence.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::l2_norm;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub dim_raw: usize,
    /// Probability that the next item is drawn from the current item's
    /// content cluster (uniform within); otherwise uniform over all items.
    pub p_follow: f64,
    /// Std of the Gaussian perturbation around the cluster centroid.
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 1000,
            n_items: 100,
            n_clusters: 10,
            seq_len_min: 6,
            seq_len_max: 12,
            dim_raw: 16,
            p_follow: 0.8,
            cluster_spread: 0.1,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_users == 0 {
            return Err(Error::Config("n_items and n_users must be positive".into()));
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_items {
            return Err(Error::Config(format!(
                "n_clusters must be in 1..={}, got {}",
                self.n_items, self.n_clusters
            )));
        }
        if self.seq_len_min < 2 || self.seq_len_max < self.seq_len_min {
            return Err(Error::Config(
                "need 2 <= seq_len_min <= seq_len_max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_follow) {
            return Err(Error::Config("p_follow must be in [0, 1]".into()));
        }
        if self.dim_raw == 0 {
            return Err(Error::Config("dim_raw must be positive".into()));
        }
        if self.cluster_spread < 0.0 {
            return Err(Error::Config("cluster_spread must be >= 0".into()));
        }
        Ok(())
    }
}

/// In-memory generator output; files are rendered as strings so identical
/// seeds give byte-identical files.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub interactions_csv: String,
    pub content_tsv: String,
    pub clusters_csv: String,
    /// item index -> cluster index
    pub cluster_of: Vec<usize>,
    /// item index -> unit-norm content vector
    pub vectors: Vec<Vec<f32>>,
    /// user index -> item index sequence
    pub sequences: Vec<Vec<usize>>,
}

fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

fn user_id(u: usize) -> String {
    format!("u{u:06}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0f64, 1.0).unwrap();

    // Round-robin cluster assignment keeps sizes within one of each other.
    let cluster_of: Vec<usize> = (0..cfg.n_items).map(|i| i % cfg.n_clusters).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_clusters];
    for (i, &c) in cluster_of.iter().enumerate() {
        members[c].push(i);
    }

    // Unit-norm centroids, then unit-norm perturbed item vectors.
    let mut centroids = Vec::with_capacity(cfg.n_clusters);
    for _ in 0..cfg.n_clusters {
        let mut v: Vec<f64> = (0..cfg.dim_raw).map(|_| normal.sample(&mut rng)).collect();
        let n = l2_norm(&v);
        for x in &mut v {
            *x /= n;
        }
        centroids.push(v);
    }
    let mut vectors = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let c = &centroids[cluster_of[i]];
        let mut v: Vec<f64> = c
            .iter()
            .map(|&x| x + cfg.cluster_spread * normal.sample(&mut rng))
            .collect();
        let n = l2_norm(&v);
        for x in &mut v {
            *x /= n;
        }
        vectors.push(v.into_iter().map(|x| x as f32).collect::<Vec<f32>>());
    }

    // Markov walk per user.
    let mut sequences = Vec::with_capacity(cfg.n_users);
    let mut interactions_csv = String::new();
    for u in 0..cfg.n_users {
        let len = rng.random_range(cfg.seq_len_min..=cfg.seq_len_max);
        let mut seq = Vec::with_capacity(len);
        let mut cur = rng.random_range(0..cfg.n_items);
        seq.push(cur);
        for _ in 1..len {
            let next = if rng.random::<f64>() < cfg.p_follow {
                let m = &members[cluster_of[cur]];
                m[rng.random_range(0..m.len())]
            } else {
                rng.random_range(0..cfg.n_items)
            };
            seq.push(next);
            cur = next;
        }
        for (l, &it) in seq.iter().enumerate() {
            interactions_csv.push_str(&format!("{},{},{}\n", user_id(u), item_id(it), l));
        }
        sequences.push(seq);
    }

    let mut content_tsv = String::new();
    for (i, v) in vectors.iter().enumerate() {
        content_tsv.push_str(&item_id(i));
        content_tsv.push('\t');
        let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        content_tsv.push_str(&vals.join(" "));
        content_tsv.push('\n');
    }

    let mut clusters_csv = String::from("item_id,cluster_id\n");
    for (i, &c) in cluster_of.iter().enumerate() {
        clusters_csv.push_str(&format!("{},{c}\n", item_id(i)));
    }

    Ok(SynthData {
        interactions_csv,
        content_tsv,
        clusters_csv,
        cluster_of,
        vectors,
        sequences,
    })
}

/// File names used by both the generator and the CLI.
pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const CONTENT_FILE: &str = "content.tsv";
pub const CLUSTERS_FILE: &str = "clusters.csv";

pub fn write_files(data: &SynthData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(INTERACTIONS_FILE), &data.interactions_csv)?;
    std::fs::write(dir.join(CONTENT_FILE), &data.content_tsv)?;
    std::fs::write(dir.join(CLUSTERS_FILE), &data.clusters_csv)?;
    Ok(())
}

/// Exact expected NDCG@N of the oracle that knows the generator: it ranks
/// the current cluster's items (uniform within) above all others.
///
/// The walk's stationary distribution over clusters is size-weighted, so
/// the expectation averages per-cluster terms with weight |c|/n. Within
/// cluster c the target lands inside c with probability
/// `q_c = p_follow + (1 - p_follow) |c|/n`, uniformly placed at ranks
/// 1..=|c|; otherwise uniformly at ranks |c|+1..=n.
pub fn oracle_ndcg_bound(cfg: &SynthConfig, n_cutoff: usize) -> f64 {
    let n = cfg.n_items as f64;
    let mut sizes = vec![0usize; cfg.n_clusters];
    for i in 0..cfg.n_items {
        sizes[i % cfg.n_clusters] += 1;
    }
    let gain = |rank: usize| 1.0 / ((rank as f64) + 1.0).log2();
    let mut expectation = 0.0;
    for &k in &sizes {
        let kf = k as f64;
        let q = cfg.p_follow + (1.0 - cfg.p_follow) * kf / n;
        let a: f64 = (1..=k.min(n_cutoff)).map(gain).sum::<f64>() / kf;
        let b: f64 = if k < n_cutoff && cfg.n_items > k {
            ((k + 1)..=n_cutoff.min(cfg.n_items)).map(gain).sum::<f64>() / (n - kf)
        } else {
            0.0
        };
        expectation += (kf / n) * (q * a + (1.0 - q) * b);
    }
    expectation
}
