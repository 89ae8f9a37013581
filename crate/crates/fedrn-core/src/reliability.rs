//! Server-side reliability scoring: data expertise from training accuracy,
//! data similarity from softmax outputs on a shared Gaussian probe, and the
//! combined score used to pick the top-k neighbor clients.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::Prediction;
use crate::rng::RngStream;

pub type ClientId = usize;

/// Value assigned when min-max normalization sees a constant input, and for
/// clients the server has no information about yet.
pub const NO_INFORMATION: f64 = 0.5;

/// The shared random input every client evaluates; fixed for a whole
/// simulation so similarity scores stay comparable across rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeInput {
    features: Array1<f64>,
}

impl ProbeInput {
    /// Standard Gaussian probe of the given dimension.
    pub fn generate(dim: usize, stream: RngStream) -> Self {
        let normal = Normal::<f64>::new(0.0, 1.0).expect("valid normal");
        let mut rng = stream.rng();
        ProbeInput { features: Array1::from_shape_fn(dim, |_| normal.sample(&mut rng)) }
    }

    pub fn features(&self) -> &Array1<f64> {
        &self.features
    }
}

fn min_max_normalize(values: &mut [f64]) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        values.iter_mut().for_each(|v| *v = NO_INFORMATION);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - min) / (max - min));
    }
}

/// Min-max-normalized training accuracies over the scored client pool.
/// Identical accuracies carry no information and map to [`NO_INFORMATION`].
pub fn expertise_scores(accuracies: &[f64]) -> Result<Vec<f64>> {
    if accuracies.len() < 2 {
        return Err(Error::contract("expertise needs at least 2 scored clients"));
    }
    if accuracies.iter().any(|a| !a.is_finite()) {
        return Err(Error::contract("accuracies must be finite"));
    }
    let mut out = accuracies.to_vec();
    min_max_normalize(&mut out);
    Ok(out)
}

pub fn cosine_similarity(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

/// Pairwise cosine similarity of probe outputs, min-max normalized over the
/// off-diagonal entries; the diagonal (self-similarity) is pinned to 1.
pub fn similarity_matrix(probe_outputs: &[Prediction]) -> Result<Array2<f64>> {
    let n = probe_outputs.len();
    if n == 0 {
        return Err(Error::contract("similarity needs at least one client"));
    }
    let dim = probe_outputs[0].probs.len();
    for p in probe_outputs {
        if p.probs.len() != dim {
            return Err(Error::contract("probe outputs must share a length"));
        }
        if p.probs.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::contract("probe outputs must be valid probability vectors"));
        }
    }

    // Each pair is computed once, so the matrix is symmetric by
    // construction.
    let mut raw: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for c in 0..n {
        for other in c + 1..n {
            raw.push(cosine_similarity(&probe_outputs[c].probs, &probe_outputs[other].probs));
        }
    }
    min_max_normalize(&mut raw);

    let mut matrix = Array2::from_elem((n, n), 1.0);
    let mut it = raw.into_iter();
    for c in 0..n {
        for other in c + 1..n {
            let v = it.next().unwrap();
            matrix[[c, other]] = v;
            matrix[[other, c]] = v;
        }
    }
    Ok(matrix)
}

/// Combined reliability `alpha * expertise(n) + (1 - alpha) * sim(c, n)`.
/// The diagonal uses self-similarity 1.
pub fn reliability_scores(expertise: &[f64], similarity: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    let n = expertise.len();
    if similarity.dim() != (n, n) {
        return Err(Error::contract(format!(
            "similarity is {:?}, expected ({n}, {n})",
            similarity.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(Array2::from_shape_fn((n, n), |(c, other)| {
        alpha * expertise[other] + (1.0 - alpha) * similarity[[c, other]]
    }))
}

/// The k neighbors with the largest scores; ties resolve to the smaller
/// client id. `scores` must not include the target itself.
pub fn top_k_neighbors(scores: &[(ClientId, f64)], k: usize) -> Result<Vec<ClientId>> {
    if k == 0 {
        return Err(Error::contract("top_k_neighbors requires k >= 1"));
    }
    if k > scores.len() {
        return Err(Error::config(format!(
            "requested {k} neighbors but only {} are available",
            scores.len()
        )));
    }
    let mut ranked: Vec<(ClientId, f64)> = scores.to_vec();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(id, _)| id).collect())
}

/// One round's reliability view over the clients the server has seen.
#[derive(Clone, Debug)]
pub struct ReliabilityTable {
    pub clients: Vec<ClientId>,
    pub raw_accuracies: Vec<f64>,
    pub expertise: Vec<f64>,
    pub similarity: Array2<f64>,
    pub reliability: Array2<f64>,
    pub alpha: f64,
}

impl ReliabilityTable {
    pub fn build(
        clients: Vec<ClientId>,
        accuracies: Vec<f64>,
        probe_outputs: &[Prediction],
        alpha: f64,
    ) -> Result<Self> {
        if clients.len() != accuracies.len() || clients.len() != probe_outputs.len() {
            return Err(Error::contract("table inputs must align"));
        }
        let expertise = expertise_scores(&accuracies)?;
        let similarity = similarity_matrix(probe_outputs)?;
        let reliability = reliability_scores(&expertise, &similarity, alpha)?;
        Ok(ReliabilityTable {
            clients,
            raw_accuracies: accuracies,
            expertise,
            similarity,
            reliability,
            alpha,
        })
    }

    pub fn position(&self, client: ClientId) -> Option<usize> {
        self.clients.iter().position(|&c| c == client)
    }

    pub fn expertise_of(&self, client: ClientId) -> Option<f64> {
        self.position(client).map(|i| self.expertise[i])
    }

    /// Reliability of neighbor `n` from the point of view of client `c`.
    /// A target the server has not seen yet contributes no similarity
    /// information, which scores as [`NO_INFORMATION`].
    pub fn score(&self, c: ClientId, n: ClientId) -> Option<f64> {
        let n_pos = self.position(n)?;
        let sim = match self.position(c) {
            Some(c_pos) => self.similarity[[c_pos, n_pos]],
            None if c == n => 1.0,
            None => NO_INFORMATION,
        };
        Some(self.alpha * self.expertise[n_pos] + (1.0 - self.alpha) * sim)
    }

    /// Reliability of a client with respect to itself (self-similarity 1).
    pub fn self_score(&self, c: ClientId) -> f64 {
        let exp = self.expertise_of(c).unwrap_or(NO_INFORMATION);
        self.alpha * exp + (1.0 - self.alpha) * 1.0
    }

    /// The k most reliable neighbors of `c` among the seen clients.
    pub fn top_k(&self, c: ClientId, k: usize) -> Result<Vec<ClientId>> {
        let scores: Vec<(ClientId, f64)> = self
            .clients
            .iter()
            .filter(|&&n| n != c)
            .map(|&n| (n, self.score(c, n).expect("n comes from the table")))
            .collect();
        top_k_neighbors(&scores, k)
    }

    /// Square CSV of the similarity matrix, header row and column of client
    /// ids included.
    pub fn similarity_csv(&self) -> String {
        let mut out = String::from("client");
        for c in &self.clients {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (i, c) in self.clients.iter().enumerate() {
            out.push_str(&c.to_string());
            for j in 0..self.clients.len() {
                out.push_str(&format!(",{}", self.similarity[[i, j]]));
            }
            out.push('\n');
        }
        out
    }
}
