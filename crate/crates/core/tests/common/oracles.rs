//! Independent reference implementations used by several test targets.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use pigen_core::corpus::{Family, BOS, EOS, PAD};
use pigen_core::decoding::{apply_repetition_penalty, StepModel};
use pigen_core::retrieval::ExperienceBank;
use pigen_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive scan: score every row, then a stable selection sort by
/// (score desc, stay id asc).
pub fn brute_force_topk(
    bank: &ExperienceBank,
    family: Family,
    q: &[f64],
    n_p: usize,
    exclude: Option<&str>,
) -> Vec<(String, bool)> {
    let index = bank.family(family);
    let mut pool: Vec<(f64, String)> = Vec::new();
    for (row, e) in bank.entries().iter().enumerate() {
        if Some(e.stay_id.as_str()) == exclude {
            continue;
        }
        let v = index.vector(row);
        let dot: f64 = q.iter().zip(v).map(|(a, b)| a * b).sum();
        let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let s = if nq == 0.0 || nv == 0.0 { 0.0 } else { dot / (nq * nv) };
        pool.push((s, e.stay_id.clone()));
    }
    let mut out = Vec::new();
    while out.len() < n_p && !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (s, id) = &pool[i];
            let (bs, bid) = &pool[best];
            if s > bs || (s == bs && id < bid) {
                best = i;
            }
        }
        out.push((pool.remove(best).1, false));
    }
    let last = out.last().unwrap().0.clone();
    while out.len() < n_p {
        out.push((last.clone(), true));
    }
    out
}

/// Literal dense evaluation with explicit loops: Â = A + I, D̂_jj = Σ_k Â_jk,
/// out = ReLU(Â · D̂⁻¹ · H · W + b).
pub fn naive_gcn(a: &[f64], n: usize, h: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let d = b.len();
    let a_hat: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] + if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let deg: Vec<f64> = a_hat.iter().map(|r| r.iter().sum()).collect();
    let mut dinv_h = vec![vec![0.0; d]; n];
    for j in 0..n {
        for c in 0..d {
            dinv_h[j][c] = h[j * d + c] / deg[j];
        }
    }
    let mut prop = vec![vec![0.0; d]; n];
    for i in 0..n {
        for c in 0..d {
            for j in 0..n {
                prop[i][c] += a_hat[i][j] * dinv_h[j][c];
            }
        }
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            let mut s = b[c];
            for k in 0..d {
                s += prop[i][k] * w[k * d + c];
            }
            out[i * d + c] = s.max(0.0);
        }
    }
    out
}

/// Logits are a pure function of the fed prefix.
pub struct TableModel {
    pub vocab: usize,
    pub seed: u64,
    pub scale: f64,
}

impl TableModel {
    pub fn logits(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        (0..self.vocab).map(|_| rng.gen_range(-self.scale..self.scale)).collect()
    }
}

impl StepModel for TableModel {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self, _example: usize) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, states: &mut [Vec<usize>], tokens: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (s, &t) in states.iter_mut().zip(tokens) {
            s.push(t);
            out.extend(self.logits(s));
        }
        Ok(out)
    }
}

pub fn log_probs(logits: &[f64], history: &[usize], theta: f64) -> Vec<f64> {
    let mut l = logits.to_vec();
    l[PAD] = f64::NEG_INFINITY;
    l[BOS] = f64::NEG_INFINITY;
    apply_repetition_penalty(&mut l, history, theta);
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = l.iter().map(|x| (x - max).exp()).sum();
    let lse = max + z.ln();
    l.iter().map(|x| x - lse).collect()
}

/// Every path of up to `depth` tokens with its score, recomputed from
/// scratch by replaying the full prefix.
pub fn enumerate(model: &TableModel, depth: usize, theta: f64) -> Vec<(Vec<usize>, f64)> {
    let mut paths = vec![(Vec::new(), 0.0)];
    let mut frontier = vec![(Vec::<usize>::new(), 0.0)];
    for _ in 0..depth {
        let mut next = Vec::new();
        for (p, s) in &frontier {
            if p.last() == Some(&EOS) {
                continue;
            }
            let mut fed = vec![BOS];
            fed.extend(p);
            let lp = log_probs(&model.logits(&fed), p, theta);
            for t in 0..model.vocab {
                if lp[t].is_finite() {
                    let mut q = p.clone();
                    q.push(t);
                    next.push((q, s + lp[t]));
                }
            }
        }
        paths.extend(next.iter().cloned());
        frontier = next;
    }
    paths
}

/// Beam semantics replayed over the enumerated tree: at every depth only the
/// top `k` extensions of retained prefixes survive.
pub fn beam_oracle(model: &TableModel, k: usize, depth: usize, theta: f64) -> (Vec<usize>, f64) {
    let all = enumerate(model, depth, theta);
    let mut retained: Vec<Vec<usize>> = vec![Vec::new()];
    let mut finished: Vec<(Vec<usize>, f64, usize)> = Vec::new();
    for level in 1..=depth {
        let mut ext: Vec<&(Vec<usize>, f64)> = all
            .iter()
            .filter(|(p, _)| p.len() == level && retained.contains(&p[..level - 1].to_vec()))
            .collect();
        ext.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ext.truncate(k);
        retained = Vec::new();
        for (p, s) in ext {
            if p.last() == Some(&EOS) {
                finished.push((p[..p.len() - 1].to_vec(), *s, level));
            } else {
                retained.push(p.clone());
            }
        }
        if retained.is_empty() {
            break;
        }
        let best_alive = all
            .iter()
            .filter(|(p, _)| retained.contains(p))
            .map(|x| x.1)
            .fold(f64::NEG_INFINITY, f64::max);
        if finished.iter().any(|f| f.1 >= best_alive) {
            break;
        }
    }
    if let Some(best) = finished
        .iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)).then_with(|| a.0.cmp(&b.0)))
    {
        return (best.0.clone(), best.1);
    }
    let all_map: Vec<_> = all.iter().filter(|(p, _)| retained.contains(p)).collect();
    let best = all_map.iter().min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))).unwrap();
    (best.0.clone(), best.1)
}
