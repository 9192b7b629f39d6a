//! Oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use std::io::Write;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};

use drp_core::checkpoint::{Checkpoint, TrainingMetadata};
use drp_core::encoder::EncoderConfig;
use drp_core::model::{Model, ModelConfig};
use drp_core::survival::IntervalGrid;
use drp_core::synth::{generate_synthetic, SyntheticConfig, SyntheticData};
use drp_core::tokenizer::{build_vocabularies, GeneVocab, MutationVocab};
use drp_core::{Graph, Mode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runs one acceptance criterion and writes a single PASS/FAIL line straight
/// to stdout, bypassing the test harness capture.
pub fn criterion(name: &str, body: impl FnOnce() -> Result<String, String>) {
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let (ok, detail) = match &outcome {
        Ok(Ok(d)) => (true, d.clone()),
        Ok(Err(d)) => (false, d.clone()),
        Err(p) => (
            false,
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    let line = format!("[acceptance] {} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    match outcome {
        Err(p) => resume_unwind(p),
        Ok(Err(d)) => panic!("{name} failed: {d}"),
        Ok(Ok(_)) => {}
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform on `[-hi, -lo] ∪ [lo, hi]`, keeping clear of kinks at zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central-difference step. Smaller steps drown near-zero gradients in
/// roundoff; larger ones start stepping across ReLU kinks.
pub const FD_STEP: f64 = 1e-5;
const FD_MAX_COORDS: usize = 48;

/// `|analytic − numeric| / (|numeric| + 1e-8)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (n.abs() + 1e-8)
}

/// Random fixed projection so non-scalar outputs get a non-trivial
/// gradient: `Σ out ⊙ W`.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    if g.value(out).len() == 1 && g.shape(out).is_empty() {
        return out;
    }
    let shape = g.shape(out).to_vec();
    let w = uniform(&mut rng(seed ^ 0x5eed), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of `build` with respect to every input (at most
/// `FD_MAX_COORDS` sampled coordinates per input).
pub fn grad_check<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::new(Mode::Train, seed);
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = project(&mut g, out, seed);
        (g, vars, loss)
    };
    let (g, vars, loss) = eval(inputs);
    let grads = g.backward(loss).unwrap();
    let mut pick = rng(seed.wrapping_add(17));
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let coords: Vec<usize> = if x.len() <= FD_MAX_COORDS {
            (0..x.len()).collect()
        } else {
            (0..FD_MAX_COORDS).map(|_| pick.random_range(0..x.len())).collect()
        };
        for c in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= FD_STEP;
            let (gp, _, lp) = eval(&plus);
            let (gm, _, lm) = eval(&minus);
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[c], numeric));
        }
    }
    worst
}

/// All `K + 1` valid MTLR label sequences by filtering `{0,1}^K` to the
/// monotone ones: `y_j = 1` once the event has happened.
pub fn mtlr_sequences(k: usize) -> Vec<Vec<u8>> {
    (0..1u32 << k)
        .map(|bits| (0..k).map(|j| ((bits >> j) & 1) as u8).collect::<Vec<u8>>())
        .filter(|y| y.windows(2).all(|w| w[0] <= w[1]))
        .collect()
}

fn seq_score(phi: &[f64], y: &[u8]) -> f64 {
    phi.iter().zip(y).map(|(p, &b)| p * b as f64).sum()
}

fn partition(phi: &[f64], seqs: &[Vec<u8>]) -> f64 {
    seqs.iter().map(|y| seq_score(phi, y).exp()).sum()
}

/// `P(event in interval c)` for 0-based `c`, `c = K` meaning no event.
pub fn enum_event_distribution(phi: &[f64]) -> Vec<f64> {
    let k = phi.len();
    let seqs = mtlr_sequences(k);
    let z = partition(phi, &seqs);
    let mut p = vec![0.0; k + 1];
    for y in &seqs {
        let c = y.iter().position(|&b| b == 1).unwrap_or(k);
        p[c] += seq_score(phi, y).exp() / z;
    }
    p
}

/// `F(τ_m)` for `m = 0..=K`: probability no event has happened by the end
/// of interval `m`.
pub fn enum_survival(phi: &[f64]) -> Vec<f64> {
    let k = phi.len();
    let seqs = mtlr_sequences(k);
    let z = partition(phi, &seqs);
    (0..=k)
        .map(|m| {
            if m == 0 {
                return 1.0;
            }
            seqs.iter()
                .filter(|y| y[m - 1] == 0)
                .map(|y| seq_score(phi, y).exp())
                .sum::<f64>()
                / z
        })
        .collect()
}

/// Negative log-likelihood of one record by enumeration. `interval` is
/// 1-based (`K + 1` past the horizon). A censored record is consistent with
/// every sequence still at zero at the end of its interval (or of the last
/// interval).
pub fn enum_nll(phi: &[f64], interval: usize, observed: bool) -> f64 {
    let k = phi.len();
    let seqs = mtlr_sequences(k);
    let z = partition(phi, &seqs);
    let consistent: f64 = seqs
        .iter()
        .filter(|y| {
            let first = y.iter().position(|&b| b == 1).unwrap_or(k);
            if observed {
                first == (interval - 1).min(k)
            } else {
                y[(interval - 1).min(k - 1)] == 0
            }
        })
        .map(|y| seq_score(phi, y).exp())
        .sum();
    z.ln() - consistent.ln()
}

/// Harrell's C by enumerating ordered pairs.
pub fn brute_ci(t: &[f64], e: &[bool], r: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0u64, 0u64);
    for i in 0..t.len() {
        for j in 0..t.len() {
            if e[i] && t[i] < t[j] {
                den += 2;
                num += match r[i].partial_cmp(&r[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (den > 0).then(|| num as f64 / den as f64)
}

/// Mann–Whitney pair counting.
pub fn brute_auroc(y: &[bool], s: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0u64, 0u64);
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] && !y[j] {
                den += 2;
                num += match s[i].partial_cmp(&s[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (den > 0).then(|| num as f64 / den as f64)
}

/// Average precision by sweeping every distinct score as a threshold and
/// recounting the predicted-positive set from scratch each time. The recall
/// step is taken in counts, `Δtp / P`.
pub fn sweep_auprc(y: &[bool], s: &[f64]) -> Option<f64> {
    let positives = y.iter().filter(|&&b| b).count();
    if positives == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for th in thresholds {
        let predicted: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= th).collect();
        let tp = predicted.iter().filter(|&&i| y[i]).count();
        let precision = tp as f64 / predicted.len() as f64;
        ap += (tp - prev_tp) as f64 / positives as f64 * precision;
        prev_tp = tp;
    }
    Some(ap)
}

/// Synthetic world with a small catalog-scoring model.
pub struct World {
    pub data: SyntheticData,
    pub gene_vocab: GeneVocab,
    pub mutation_vocab: MutationVocab,
}

impl World {
    pub fn new(cfg: SyntheticConfig) -> Self {
        let data = generate_synthetic(&cfg).unwrap();
        let (gene_vocab, mutation_vocab) = build_vocabularies(&data.panel, &data.known_pairs).unwrap();
        Self {
            data,
            gene_vocab,
            mutation_vocab,
        }
    }

    /// 70 drugs, small record counts.
    pub fn catalog70() -> Self {
        Self::new(SyntheticConfig {
            n_drugs: 70,
            panel_size: 16,
            pairs_per_gene: 2,
            n_recist: 40,
            n_cellline: 20,
            n_survival_crc: 20,
            n_survival_nsclc: 20,
            n_cohort: 25,
            seed: 11,
            ..Default::default()
        })
    }

    pub fn small_model_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d: 16,
                heads: 4,
                ffn_dim: 32,
                layers: 1,
                ..Default::default()
            },
            intervals: 4,
            ..Default::default()
        }
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let grid = IntervalGrid::new(vec![90.0, 180.0, 365.0, 730.0]).unwrap();
        Checkpoint {
            model: Model::new(
                Self::small_model_config(),
                self.gene_vocab.clone(),
                self.mutation_vocab.clone(),
                Some(grid),
                seed,
            )
            .unwrap(),
            metadata: TrainingMetadata {
                stage: "fixture".into(),
                seed,
                ..Default::default()
            },
        }
    }
}

/// Compiled validator for `schemas/<name>.schema.json`.
pub fn schema(name: &str) -> jsonschema::Validator {
    let path = format!("{}/schemas/{name}.schema.json", env!("CARGO_MANIFEST_DIR"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&v).unwrap()
}

pub fn schema_errors(v: &jsonschema::Validator, doc: &[u8]) -> Vec<String> {
    let json: serde_json::Value = serde_json::from_slice(doc).unwrap();
    v.iter_errors(&json)
        .map(|e| format!("{} at {}", e, e.instance_path()))
        .collect()
}
