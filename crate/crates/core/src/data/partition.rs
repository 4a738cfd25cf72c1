use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::rng::{stream, tag};

pub const DEFAULT_MIN_PER_CLIENT: usize = 10;
const REDRAW_BUDGET: usize = 100;

/// One client's sample indices and their train/test/val split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClientSplit {
    pub indices: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<ClientSplit>,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn total(&self) -> usize {
        self.clients.iter().map(|c| c.indices.len()).sum()
    }
}

/// Shannon entropy (nats) of the label histogram of `indices`.
pub fn label_entropy(labels: &[u8], indices: &[usize]) -> f64 {
    let mut counts = [0usize; 256];
    for &i in indices {
        counts[labels[i] as usize] += 1;
    }
    let n = indices.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Integer counts summing to `total`, proportional to `weights`; leftover
/// units go to the largest fractional parts (lowest index on ties).
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn dirichlet(n: usize, concentration: f64, rng: &mut crate::rng::StreamRng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|d| d / sum).collect();
        }
    }
}

/// Label-skewed split of a dataset over clients: each class is divided among
/// clients in proportions drawn from a symmetric Dirichlet with
/// concentration `lambda` (smaller means more skew).
pub fn dirichlet_partition(
    labels: &[u8],
    n_classes: usize,
    n_clients: usize,
    lambda: f64,
    seed: u64,
    min_per_client: usize,
) -> Result<Partition> {
    if n_clients < 2 {
        return Err(Error::Config(format!("need at least 2 clients, got {n_clients}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    if n_clients * min_per_client > labels.len() {
        return Err(Error::Config(format!(
            "{} samples cannot give {n_clients} clients {min_per_client} samples each",
            labels.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = stream(&[seed, tag::PARTITION]);
    for _ in 0..REDRAW_BUDGET {
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let q = dirichlet(n_clients, lambda, &mut rng);
            let counts = largest_remainder(&q, members.len());
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let mut start = 0;
            for (client, &c) in clients.iter_mut().zip(&counts) {
                client.extend_from_slice(&shuffled[start..start + c]);
                start += c;
            }
        }
        if clients.iter().all(|c| c.len() >= min_per_client) {
            for c in &mut clients {
                c.sort_unstable();
            }
            return Ok(Partition {
                clients: clients.into_iter().map(|indices| ClientSplit { indices, ..Default::default() }).collect(),
            });
        }
    }
    Err(Error::Config(format!(
        "no allocation gave every client {min_per_client} samples after {REDRAW_BUDGET} draws; \
         try a larger lambda or fewer clients"
    )))
}

/// Per-client train/test/val split with `ratios = (train, test, val)`.
///
/// Test and validation sizes are `floor(ratio · n)`; the remainder trains.
/// When every class on a client has at least three samples the cut is
/// stratified so each class is spread proportionally over the three parts.
pub fn split_tvt(partition: &Partition, labels: &[u8], ratios: (f64, f64, f64), seed: u64) -> Result<Partition> {
    let (tr, te, va) = ratios;
    if !(tr > 0.0 && te > 0.0 && va > 0.0) || ((tr + te + va) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let mut clients = Vec::with_capacity(partition.n_clients());
    for (k, client) in partition.clients.iter().enumerate() {
        let n = client.indices.len();
        if n < 3 {
            return Err(Error::Config(format!("client {k} has {n} samples; at least 3 are needed to split")));
        }
        let n_test = (te * n as f64 + 1e-9).floor() as usize;
        let n_val = (va * n as f64 + 1e-9).floor() as usize;
        let mut rng = stream(&[seed, tag::SPLIT, k as u64]);
        let order = stratified_order(&client.indices, labels, &mut rng);
        let test = order[..n_test].to_vec();
        let val = order[n_test..n_test + n_val].to_vec();
        let train = order[n_test + n_val..].to_vec();
        clients.push(ClientSplit { indices: client.indices.clone(), train, test, val });
    }
    Ok(Partition { clients })
}

/// A shuffled ordering of `indices`. If every present class has ≥ 3 members,
/// samples are interleaved by their relative rank within their class, so any
/// prefix holds each class in proportion.
fn stratified_order(indices: &[usize], labels: &[u8], rng: &mut crate::rng::StreamRng) -> Vec<usize> {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for &i in &shuffled {
        by_class[labels[i] as usize].push(i);
    }
    if by_class.iter().any(|c| !c.is_empty() && c.len() < 3) {
        return shuffled;
    }
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(indices.len());
    for (class, members) in by_class.iter().enumerate() {
        let m = members.len() as f64;
        for (rank, &i) in members.iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / m, class, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, i)| i).collect()
}
