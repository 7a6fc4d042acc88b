mod common;

use common::{central_difference, rel_err};
use mposhare::mlm::{mlm_loss, MaskedBatch};
use mposhare::model::{ModelConfig, ToyTransformer};
use mposhare::shared::Role;
use mposhare::tensor::DenseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randomized(config: ModelConfig, seed: u64) -> ToyTransformer {
    let mut m = ToyTransformer::zeros(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_mut(&mut |name, t| {
        let (base, spread) = if name.ends_with("gamma") { (1.0, 0.2) } else { (0.0, 0.5) };
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = base + rng.random_range(-spread..spread));
    });
    m
}

fn tokens(batch: usize, seq: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| (0..seq).map(|_| rng.random_range(2..vocab)).collect())
        .collect()
}

fn every_position(labels: Vec<Vec<usize>>) -> MaskedBatch {
    let selected = labels.iter().map(|s| vec![true; s.len()]).collect();
    MaskedBatch {
        inputs: labels.clone(),
        labels,
        selected,
    }
}

// ── independent dense oracle ───────────────────────────────────────

fn row_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) / (var + 1e-5).sqrt() * g + b)
        .collect()
}

fn dense(x: &[Vec<f64>], w: &DenseTensor, bias: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| bias[j] + row.iter().enumerate().map(|(i, v)| v * w.at(i, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn oracle_logits(m: &ToyTransformer, toks: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let c = m.config();
    let h = c.hidden;
    let dh = h / c.heads;
    let mut out = Vec::new();
    for seq in toks {
        let t_len = seq.len();
        let mut x: Vec<Vec<f64>> = seq
            .iter()
            .enumerate()
            .map(|(t, &tok)| (0..h).map(|j| m.token_emb.at(tok, j) + m.pos_emb.at(t, j)).collect())
            .collect();
        for depth in 0..c.layers {
            let layer = m.layer_at(depth);
            let w = |r: Role| layer.linear(r).effective_weight(&m.store).unwrap();
            let b = |r: Role| layer.linear(r).bias().data().to_vec();
            let q = dense(&x, &w(Role::Query), &b(Role::Query));
            let k = dense(&x, &w(Role::Key), &b(Role::Key));
            let v = dense(&x, &w(Role::Value), &b(Role::Value));
            let mut ctx = vec![vec![0.0; h]; t_len];
            for head in 0..c.heads {
                let cols = head * dh..(head + 1) * dh;
                for i in 0..t_len {
                    let scores: Vec<f64> = (0..t_len)
                        .map(|j| cols.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let z: f64 = scores.iter().map(|s| s.exp()).sum();
                    for j in 0..t_len {
                        let p = scores[j].exp() / z;
                        for d in cols.clone() {
                            ctx[i][d] += p * v[j][d];
                        }
                    }
                }
            }
            let a = dense(&ctx, &w(Role::Output), &b(Role::Output));
            let x1: Vec<Vec<f64>> = x
                .iter()
                .zip(&a)
                .map(|(r, s)| {
                    let sum: Vec<f64> = r.iter().zip(s).map(|(p, q)| p + q).collect();
                    row_layer_norm(&sum, layer.ln1.gamma.data(), layer.ln1.beta.data())
                })
                .collect();
            let f = dense(&x1, &w(Role::FfnIn), &b(Role::FfnIn));
            let act: Vec<Vec<f64>> = f
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|&z| {
                            let inner = (2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3));
                            0.5 * z * (1.0 + inner.tanh())
                        })
                        .collect()
                })
                .collect();
            let f2 = dense(&act, &w(Role::FfnOut), &b(Role::FfnOut));
            x = x1
                .iter()
                .zip(&f2)
                .map(|(r, s)| {
                    let sum: Vec<f64> = r.iter().zip(s).map(|(p, q)| p + q).collect();
                    row_layer_norm(&sum, layer.ln2.gamma.data(), layer.ln2.beta.data())
                })
                .collect();
        }
        for row in &x {
            out.push(
                (0..c.vocab_size)
                    .map(|v| m.out_bias.data()[v] + (0..h).map(|j| row[j] * m.token_emb.at(v, j)).sum::<f64>())
                    .collect(),
            );
        }
    }
    out
}

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::toy(2, 8, 2, 11, 4);
    c.mpo_order = 3;
    c.adapter_rank = 2;
    c
}

#[test]
fn forward_matches_dense_oracle() {
    let m = randomized(small_config(), 1);
    let toks = tokens(2, 4, 11, 2);
    let logits = m.logits(&toks).unwrap();
    let oracle = oracle_logits(&m, &toks);
    for (r, row) in oracle.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            assert!((logits.at(r, c) - v).abs() < 1e-10, "({r},{c}) {} vs {v}", logits.at(r, c));
        }
    }
}

fn check_gradients(config: ModelConfig, seed: u64) {
    let m = randomized(config, seed);
    let batch = every_position(tokens(2, 4, m.config().vocab_size, seed + 1));
    let (_, grads) = m.loss_and_grads(&batch).unwrap();
    let loss_of = |model: &ToyTransformer| {
        let logits = model.logits(&batch.inputs).unwrap();
        mlm_loss(&logits, &batch).unwrap().loss
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let names = m.param_names();
    for name in &names {
        let g = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let len = g.len();
        let probes: Vec<usize> = (0..3.min(len)).map(|_| rng.random_range(0..len)).collect();
        for idx in probes {
            let numeric = central_difference(1e-5, |delta| {
                let mut probe = m.clone();
                probe.with_param_mut(name, |t| t.data_mut()[idx] += delta).unwrap();
                loss_of(&probe)
            });
            let analytic = g.data()[idx];
            assert!(
                rel_err(analytic, numeric) < 1e-4 || (analytic - numeric).abs() < 1e-8,
                "{name}[{idx}]: analytic {analytic}, numeric {numeric}"
            );
        }
    }
    assert_eq!(grads.len(), names.len());
}

#[test]
fn gradients_match_finite_differences() {
    check_gradients(small_config(), 10);
}

#[test]
fn gradients_without_adapters_or_sharing() {
    let mut c = small_config();
    c.use_adapters = false;
    c.use_sharing = false;
    check_gradients(c, 20);
}

#[test]
fn gradients_with_every_layer_shared() {
    let mut c = small_config();
    c.share_all = true;
    c.mpo_order = 1;
    check_gradients(c, 30);
}

#[test]
fn zero_adapter_matches_plain_mpo_layer() {
    let mut c = small_config();
    let mut m = randomized(c.clone(), 5);
    for layer in m.layers.iter_mut() {
        for lin in layer.linears.iter_mut() {
            lin.adapter_mut().unwrap().u.scale_in_place(0.0);
        }
    }
    c.use_adapters = false;
    let mut plain = ToyTransformer::zeros(c).unwrap();
    let mut values = Vec::new();
    m.visit(&mut |n, t| values.push((n.to_string(), t.clone())));
    for (n, t) in values {
        if !n.contains("adapter") {
            plain.with_param_mut(&n, |p| *p = t).unwrap();
        }
    }
    let toks = tokens(1, 4, 11, 6);
    let a = m.logits(&toks).unwrap();
    let b = plain.logits(&toks).unwrap();
    assert!(a.sub(&b).unwrap().max_abs() < 1e-12);
}
