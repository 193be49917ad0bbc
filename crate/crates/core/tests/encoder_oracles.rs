//! Backbone forward passes against loop-level reference implementations.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rmadapter_core::autodiff::LAYER_NORM_EPS;
use rmadapter_core::encoder::{
    argmax, zero_shot_logits, zero_shot_probabilities, TransformerBlock,
};
use rmadapter_core::{DualEncoderModel, EncoderConfig, Tensor};

type Rows = Vec<Vec<f64>>;

fn small_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        vision_width: 8,
        text_width: 6,
        latent_width: 4,
        heads: 2,
        mlp_ratio: 2,
        image_size: 4,
        patch_size: 2,
        channels: 3,
        vocab: 10,
        seq_len: 5,
        temperature: 0.07,
    }
}

/// Fresh model with every tensor (including LN and biases) randomized.
fn random_model(seed: u64) -> DualEncoderModel {
    let mut m = DualEncoderModel::new(small_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in m.tensors_mut() {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += 0.1 * z;
        }
    }
    m
}

fn random_image(seed: u64, c: &EncoderConfig) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = c.image_size * c.image_size * c.channels;
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(&[c.image_size, c.image_size, c.channels], data).unwrap()
}

fn rows_of(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn affine(x: &Rows, w: &Tensor, b: &Tensor) -> Rows {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..n)
                .map(|j| b.data()[j] + (0..k).map(|i| row[i] * w.data()[i * n + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Rows, g: &Tensor, b: &Tensor) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + LAYER_NORM_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / s * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn attention(q: &Rows, k: &Rows, v: &Rows, heads: usize, causal: bool) -> Rows {
    let l = q.len();
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; l];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..l {
            let visible = if causal { i + 1 } else { l };
            let scores: Vec<f64> = (0..visible)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, w) in e.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += w / z * v[j][c];
                }
            }
        }
    }
    out
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn block(x: &Rows, p: &TransformerBlock, heads: usize, causal: bool) -> Rows {
    let h = layer_norm(x, &p.ln1_gamma, &p.ln1_beta);
    let a = attention(
        &affine(&h, &p.wq, &p.bq),
        &affine(&h, &p.wk, &p.bk),
        &affine(&h, &p.wv, &p.bv),
        heads,
        causal,
    );
    let x1 = add(x, &affine(&a, &p.wo, &p.bo));
    let h2 = layer_norm(&x1, &p.ln2_gamma, &p.ln2_beta);
    let m: Rows = affine(&h2, &p.w1, &p.b1)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add(&x1, &affine(&m, &p.w2, &p.b2))
}

fn patch_embed_loop(m: &DualEncoderModel, image: &Tensor) -> Rows {
    let c = &m.config;
    let (p, side, ch) = (c.patch_size, c.image_size, c.channels);
    let grid = side / p;
    let mut out = Vec::new();
    for py in 0..grid {
        for px in 0..grid {
            let mut flat = Vec::new();
            for dy in 0..p {
                for dx in 0..p {
                    for k in 0..ch {
                        let (y, x) = (py * p + dy, px * p + dx);
                        flat.push(image.data()[(y * side + x) * ch + k]);
                    }
                }
            }
            let idx = py * grid + px;
            let dv = c.vision_width;
            out.push(
                (0..dv)
                    .map(|j| {
                        m.patch_bias.data()[idx * dv + j]
                            + flat
                                .iter()
                                .enumerate()
                                .map(|(i, v)| v * m.patch_weight.data()[i * dv + j])
                                .sum::<f64>()
                    })
                    .collect(),
            );
        }
    }
    out
}

fn assert_rows_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= tol, "entry {i}: {g} vs {w}");
    }
}

#[test]
fn patch_embed_matches_loop() {
    for seed in 0..5 {
        let m = random_model(seed);
        let img = random_image(seed, &m.config);
        let got = m.patch_embed(&img).unwrap();
        let want: Vec<f64> = patch_embed_loop(&m, &img).concat();
        assert_rows_close(got.data(), &want, 1e-12);
    }
}

#[test]
fn vision_forward_matches_hand_composed_blocks() {
    for seed in 0..3 {
        let m = random_model(seed);
        let c = m.config.clone();
        let img = random_image(seed + 7, &c);
        let mut x = vec![m.cls.data().to_vec()];
        x.extend(patch_embed_loop(&m, &img));
        let x0 = x.clone();
        let mut inputs = Vec::new();
        for b in &m.vision_blocks {
            inputs.push(x.clone());
            x = block(&x, b, c.heads, false);
        }
        let cls = layer_norm(&x[..1].to_vec(), &m.vision_ln_gamma, &m.vision_ln_beta);
        let want = affine(&cls, &m.image_proj, &Tensor::zeros(&[c.latent_width]));

        let (got, got_inputs) = m.vision_forward(&img).unwrap();
        assert_rows_close(got.data(), &want[0], 1e-10);
        assert_eq!(got_inputs.len(), c.layers);
        assert_eq!(got_inputs[0].data(), x0.concat().as_slice());
        for (g, w) in got_inputs.iter().zip(&inputs) {
            assert_rows_close(g.data(), &w.concat(), 1e-10);
        }
        assert_eq!(rows_of(&got_inputs[0]).len(), c.vision_seq_len());
    }
}

#[test]
fn text_forward_matches_hand_composed_blocks() {
    let m = random_model(3);
    let c = m.config.clone();
    let tokens = vec![2, 7, 4, 1, 0];
    let mut x: Rows = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            (0..c.text_width)
                .map(|j| m.token_embed.row(t)[j] + m.text_pos.row(i)[j])
                .collect()
        })
        .collect();
    for b in &m.text_blocks {
        x = block(&x, b, c.heads, true);
    }
    let eos = layer_norm(&vec![x[3].clone()], &m.text_ln_gamma, &m.text_ln_beta);
    let want = affine(&eos, &m.text_proj, &Tensor::zeros(&[c.latent_width]));
    let (got, inputs) = m.text_forward(&tokens).unwrap();
    assert_rows_close(got.data(), &want[0], 1e-10);
    assert_eq!(inputs.len(), c.layers);
}

#[test]
fn forwards_are_deterministic() {
    let m = random_model(1);
    let img = random_image(2, &m.config);
    assert_eq!(
        m.vision_forward(&img).unwrap(),
        m.vision_forward(&img).unwrap()
    );
    let tokens = vec![3, 4, 1, 0, 0];
    assert_eq!(
        m.text_forward(&tokens).unwrap(),
        m.text_forward(&tokens).unwrap()
    );
    let batch = m.encode_images(&[img.clone(), img.clone()]).unwrap();
    assert_eq!(batch.row(0), batch.row(1));
}

#[test]
fn all_pad_text_is_finite() {
    let m = random_model(4);
    let (w, _) = m.text_forward(&[0; 5]).unwrap();
    assert!(w.is_finite());
}

#[test]
fn token_out_of_range_is_an_error() {
    let m = random_model(4);
    assert!(m.text_forward(&[2, 10, 1, 0, 0]).is_err());
}

#[test]
fn zero_shot_examples() {
    let x = Tensor::vector(vec![0.3, -1.0, 2.0]);
    let same = Tensor::from_rows(&vec![vec![1.0, 2.0, 3.0]; 4]).unwrap();
    let p = zero_shot_probabilities(&x, &same, 0.07).unwrap();
    for v in p.data() {
        assert!((v - 0.25).abs() < 1e-15);
    }

    let basis = Tensor::from_rows(&[
        vec![0.0, 1.0, 0.0],
        vec![2.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ])
    .unwrap();
    let logits = zero_shot_logits(&Tensor::vector(vec![5.0, 0.0, 0.0]), &basis, 1.0).unwrap();
    assert_eq!(argmax(logits.data()), 1);

    let zero_row = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0; 3]]).unwrap();
    assert!(zero_shot_logits(&x, &zero_row, 1.0).is_err());
}

#[test]
fn zero_shot_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut draw =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let x = draw(4);
    let w: Rows = (0..3).map(|_| draw(4)).collect();
    let tau = 0.07;
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cos: Vec<f64> = w
        .iter()
        .map(|wk| x.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>() / (norm(&x) * norm(wk)))
        .collect();
    let e: Vec<f64> = cos.iter().map(|c| (c / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    let p =
        zero_shot_probabilities(&Tensor::vector(x), &Tensor::from_rows(&w).unwrap(), tau).unwrap();
    for (got, num) in p.data().iter().zip(&e) {
        assert!((got - num / z).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn probabilities_invariant_to_feature_scale(
        x in prop::collection::vec(-3.0f64..3.0, 4),
        w in prop::collection::vec(-3.0f64..3.0, 12),
        s in 0.1f64..10.0,
    ) {
        let xt = Tensor::vector(x.clone());
        prop_assume!(xt.max_abs() > 1e-2);
        let rows: Rows = w.chunks(4).map(|c| c.to_vec()).collect();
        prop_assume!(rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-2)));
        let wt = Tensor::from_rows(&rows).unwrap();
        let p1 = zero_shot_probabilities(&xt, &wt, 0.07).unwrap();
        let p2 = zero_shot_probabilities(&xt.map(|v| v * s), &wt, 0.07).unwrap();
        prop_assert!((p1.sum() - 1.0).abs() < 1e-12);
        prop_assert_eq!(argmax(p1.data()), argmax(p2.data()));
        for (a, b) in p1.data().iter().zip(p2.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
