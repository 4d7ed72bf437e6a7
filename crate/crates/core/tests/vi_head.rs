mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use common::{rng, tiny_encoder, tiny_head, uniform};
use ood_core::autodiff::gradcheck::{check_params, Tolerance};
use ood_core::autodiff::{ParamStore, Tape, Tensor};
use ood_core::encoder::{Encoder, EncoderConfig, TokenBatch, Vocabulary};
use ood_core::vi_head::{anneal_beta, kl_to_standard_normal, BaselineHead, CombinationVector, Noise, ViHead};
use ood_core::Error;

fn head(enc: &EncoderConfig, dz: usize, k: usize, seed: u64) -> (ViHead, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let h = ViHead::new(&tiny_head(dz, k), enc, &mut store, &mut rng(seed)).unwrap();
    (h, store)
}

fn set(store: &mut ParamStore<f64>, id: ood_core::autodiff::ParamId, values: &[f64]) {
    store.get_mut(id).data_mut().copy_from_slice(values);
}

fn layer_vars(tape: &mut Tape<f64>, layers: &[Vec<f64>], rows: usize) -> Vec<ood_core::autodiff::Var> {
    let d = layers[0].len() / rows;
    layers
        .iter()
        .map(|l| tape.constant(&Tensor::new(&[rows, d], l.clone()).unwrap()).unwrap())
        .collect()
}

#[test]
fn target_of_two_orthogonal_layers_with_equal_weights() {
    let (h, store) = head(&tiny_encoder(2, 2), 2, 2, 0);
    let mut tape = Tape::new();
    let layers = layer_vars(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]], 1);
    let t = h.build_target(&mut tape, &store, &layers).unwrap();
    assert_eq!(tape.value(t), &[0.5, 0.5]);
}

#[test]
fn saturated_weights_select_one_layer() {
    let (h, mut store) = head(&tiny_encoder(2, 4), 2, 2, 0);
    set(&mut store, h.combination, &[20.0, -20.0]);
    let h0 = vec![0.3, -1.2, 2.0, 0.7];
    let mut tape = Tape::new();
    let layers = layer_vars(&mut tape, &[h0.clone(), vec![5.0, 5.0, -5.0, 1.0]], 1);
    let t = h.build_target(&mut tape, &store, &layers).unwrap();
    for (a, b) in tape.value(t).iter().zip(&h0) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn target_matches_direct_weighted_sum() {
    let mut r = rng(1);
    let (l, b, d) = (5, 3, 6);
    let (h, mut store) = head(&tiny_encoder(l, d), 2, 2, 1);
    let logits: Vec<f64> = (0..l).map(|_| r.random_range(-2.0..2.0)).collect();
    set(&mut store, h.combination, &logits);
    let stack: Vec<Vec<f64>> = (0..l)
        .map(|_| uniform(&mut r, &[b * d], -1.0, 1.0).into_data())
        .collect();
    let mut tape = Tape::new();
    let layers = layer_vars(&mut tape, &stack, b);
    let t = h.build_target(&mut tape, &store, &layers).unwrap();

    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    let s: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
    assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let cv = CombinationVector { logits: logits.clone() };
    for (a, e) in cv.weights().iter().zip(&s) {
        assert!((a - e).abs() < 1e-12);
    }
    for i in 0..b * d {
        let expect: f64 = (0..l).map(|j| s[j] * stack[j][i]).sum();
        assert!((tape.value(t)[i] - expect).abs() < 1e-12);
    }
    let short = &layers[..l - 1];
    assert!(matches!(
        h.build_target(&mut tape, &store, short),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn reparameterisation_identities() {
    let enc = tiny_encoder(2, 6);
    let (h, mut store) = head(&enc, 4, 2, 2);
    let x = uniform(&mut rng(3), &[3, 6], -1.0, 1.0);

    let mut tape = Tape::new();
    let xv = tape.constant(&x).unwrap();
    let p = h.posterior(&mut tape, &store, xv, &mut Noise::Zero).unwrap();
    assert_eq!(tape.value(p.z), tape.value(p.mu));
    assert_eq!(tape.shape(p.z), &[3, 4]);

    // log σ² = 0 everywhere and ε = 1 gives z = μ + 1.
    store.get_mut(h.log_var.weight).data_mut().fill(0.0);
    store.get_mut(h.log_var.bias).data_mut().fill(0.0);
    let mut tape = Tape::new();
    let xv = tape.constant(&x).unwrap();
    let p = h
        .posterior(&mut tape, &store, xv, &mut Noise::Fixed(vec![1.0; 4]))
        .unwrap();
    for (z, m) in tape.value(p.z).iter().zip(tape.value(p.mu)) {
        assert!((z - (m + 1.0)).abs() < 1e-15);
    }
}

#[test]
fn sampled_latents_have_posterior_moments() {
    let enc = tiny_encoder(2, 4);
    let (h, store) = head(&enc, 3, 2, 4);
    let rows = 40_000;
    let one = uniform(&mut rng(5), &[4], -1.0, 1.0).into_data();
    let x = Tensor::new(&[rows, 4], one.repeat(rows)).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(&x).unwrap();
    let p = h
        .posterior(
            &mut tape,
            &store,
            xv,
            &mut Noise::Gaussian(ChaCha8Rng::seed_from_u64(6)),
        )
        .unwrap();
    let (z, mu, lv) = (tape.value(p.z), tape.value(p.mu), tape.value(p.log_var));
    for j in 0..3 {
        let col: Vec<f64> = (0..rows).map(|r| z[r * 3 + j]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = lv[j].exp().sqrt();
        // Five standard errors.
        assert!((mean - mu[j]).abs() < 5.0 * sd / (rows as f64).sqrt());
        assert!((var / (sd * sd) - 1.0).abs() < 0.05);
    }
}

#[test]
fn closed_form_kl_matches_monte_carlo() {
    let mut r = rng(7);
    for _ in 0..10 {
        let mu: Vec<f64> = (0..4).map(|_| r.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let closed = kl_to_standard_normal(&mu, &lv);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            // log q(z) − log p(z), normalizers cancel except the variance term.
            let mut term = 0.0;
            for j in 0..4 {
                let e: f64 = StandardNormal.sample(&mut r);
                let z = mu[j] + (0.5 * lv[j]).exp() * e;
                term += -0.5 * lv[j] - 0.5 * e * e + 0.5 * z * z;
            }
            acc += term;
        }
        let mc = acc / n as f64;
        assert!((mc - closed).abs() / closed < 0.01, "closed {closed} vs mc {mc}");
    }
}

#[test]
fn kl_is_nonnegative_on_many_posteriors() {
    let mut r = rng(8);
    for _ in 0..10_000 {
        let dz = r.random_range(1..16);
        let mu: Vec<f64> = (0..dz).map(|_| r.random_range(-5.0..5.0)).collect();
        let lv: Vec<f64> = (0..dz).map(|_| r.random_range(-8.0..8.0)).collect();
        assert!(kl_to_standard_normal(&mu, &lv) >= -1e-12);
    }
    assert_eq!(kl_to_standard_normal(&[0.0; 4], &[0.0; 4]), 0.0);
}

#[test]
fn cross_entropy_falls_as_correct_logit_grows() {
    let mut prev = f64::INFINITY;
    for big in [5.0, 10.0, 20.0] {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(&Tensor::new(&[1, 2], vec![big, 0.0]).unwrap()).unwrap();
        let ce = tape.cross_entropy(l, &[0]).unwrap();
        let v = tape.scalar(ce).unwrap();
        assert!(v < prev && v > 0.0);
        prev = v;
    }
    assert!(prev < 1e-8);
}

/// Everything a tiny joint loss needs.
struct Tiny {
    encoder: Encoder,
    head: ViHead,
    store: ParamStore<f64>,
    batch: TokenBatch,
    labels: Vec<usize>,
}

fn tiny(seed: u64) -> Tiny {
    let texts = ["alpha w1 w2", "beta w3", "alpha beta w1", "w2 w3 w4 beta"];
    let vocab = Vocabulary::build(texts);
    let enc_cfg = EncoderConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        ffn_dim: 16,
        max_len: 8,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let encoder = Encoder::new(&enc_cfg, vocab.len(), &mut store, &mut r).unwrap();
    let head = ViHead::new(&tiny_head(4, 2), &enc_cfg, &mut store, &mut r).unwrap();
    // Nonzero combination logits so the softmax Jacobian is exercised.
    set(&mut store, head.combination, &[0.4, -0.3]);
    let batch = TokenBatch::from_texts(texts, &vocab, 8).unwrap();
    Tiny {
        encoder,
        head,
        store,
        batch,
        labels: vec![0, 1, 0, 1],
    }
}

#[test]
fn joint_loss_gradient_for_every_parameter_group() {
    let mut t = tiny(9);
    let eps = vec![0.3, -1.1, 0.7, 0.2];
    let (encoder, head, batch, labels) = (&t.encoder, &t.head, &t.batch, &t.labels);
    let report = check_params(&mut t.store, &[], Tolerance::default(), |tape, store| {
        let out = encoder.forward(tape, store, batch)?;
        let loss = head.loss_with_beta(tape, store, &out, labels, 0.7, &mut Noise::Fixed(eps.clone()))?;
        Ok(loss.total)
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    assert_eq!(report.checked, t.store.num_values());
    for group in [
        "head.combination",
        "head.posterior.mu.weight",
        "head.posterior.log_var.weight",
        "head.decoder.out.weight",
        "head.classifier.weight",
        "encoder.token_embedding",
    ] {
        assert!(t.store.find(group).is_some(), "{group}");
    }
}

#[test]
fn breakdown_adds_up() {
    let t = tiny(10);
    for beta in [0.0, 0.25, 1.0] {
        let mut tape = Tape::new();
        let out = t.encoder.forward(&mut tape, &t.store, &t.batch).unwrap();
        let mut noise = Noise::Gaussian(ChaCha8Rng::seed_from_u64(1));
        let l = t
            .head
            .loss_with_beta(&mut tape, &t.store, &out, &t.labels, beta, &mut noise)
            .unwrap();
        let b = l.breakdown;
        assert_eq!(b.total, b.ce + b.beta * (b.recon + b.kl));
        assert!(b.kl >= -1e-6 && b.recon >= 0.0 && b.ce > 0.0);
        assert_eq!(tape.scalar(l.total).unwrap(), b.total);
    }
}

#[test]
fn zero_beta_leaves_decoder_and_combination_untouched() {
    let mut t = tiny(11);
    let mut tape = Tape::new();
    let out = t.encoder.forward(&mut tape, &t.store, &t.batch).unwrap();
    let mut noise = Noise::Gaussian(ChaCha8Rng::seed_from_u64(2));
    let l = t
        .head
        .loss_with_beta(&mut tape, &t.store, &out, &t.labels, 0.0, &mut noise)
        .unwrap();
    t.store.zero_grad();
    tape.backward(l.total, &mut t.store).unwrap();
    let d = t.head.decoder;
    for id in [
        t.head.combination,
        d.hidden.weight,
        d.hidden.bias,
        d.out.weight,
        d.out.bias,
    ] {
        let g = t.store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_default();
        assert!(g.iter().all(|&v| v == 0.0), "{}", t.store.name(id));
    }
    let g = t.store.get(t.head.classifier.weight).grad().unwrap();
    assert!(g.iter().any(|&v| v != 0.0));
}

#[test]
fn fixed_seed_is_bit_reproducible() {
    let run = || {
        let mut t = tiny(12);
        let mut tape = Tape::new();
        let out = t.encoder.forward(&mut tape, &t.store, &t.batch).unwrap();
        let mut noise = Noise::Gaussian(ChaCha8Rng::seed_from_u64(3));
        let l = t
            .head
            .loss(&mut tape, &t.store, &out, &t.labels, 3, 10, &mut noise)
            .unwrap();
        t.store.zero_grad();
        tape.backward(l.total, &mut t.store).unwrap();
        let mut bits: Vec<u64> = tape.value(l.posterior.z).iter().map(|v| v.to_bits()).collect();
        bits.push(l.breakdown.total.to_bits());
        for (_, _, p) in t.store.iter() {
            bits.extend(p.grad().unwrap_or(&[]).iter().map(|v| v.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn one_latent_sample_per_example() {
    let t = tiny(13);
    let mut tape = Tape::new();
    let out = t.encoder.forward(&mut tape, &t.store, &t.batch).unwrap();
    let mut a = ChaCha8Rng::seed_from_u64(4);
    let mut noise = Noise::Gaussian(a.clone());
    let l = t
        .head
        .loss_with_beta(&mut tape, &t.store, &out, &t.labels, 1.0, &mut noise)
        .unwrap();
    assert_eq!(tape.shape(l.posterior.z), &[4, 4]);
    // The sampler consumed exactly 4 × 4 draws.
    for _ in 0..16 {
        let _: f64 = StandardNormal.sample(&mut a);
    }
    let Noise::Gaussian(mut b) = noise else { unreachable!() };
    let (next, got): (f64, f64) = (StandardNormal.sample(&mut a), StandardNormal.sample(&mut b));
    assert_eq!(got, next);
}

#[test]
fn baseline_matches_joint_ce_with_shared_weights() {
    // With d_z = d_model, an identity posterior mean map, ε = 0 and shared
    // classifier weights, the joint head's CE equals the baseline's CE.
    let enc_cfg = tiny_encoder(2, 6);
    let mut store = ParamStore::new();
    let mut r = rng(14);
    let vocab = Vocabulary::build(["a b c", "c d"]);
    let encoder = Encoder::new(&enc_cfg, vocab.len(), &mut store, &mut r).unwrap();
    let mut base_store = store.clone();
    let vi = ViHead::new(&tiny_head(6, 3), &enc_cfg, &mut store, &mut r).unwrap();
    let base = BaselineHead::new(3, &enc_cfg, &mut base_store, &mut r).unwrap();
    let eye: Vec<f64> = (0..36).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect();
    set(&mut store, vi.mu.weight, &eye);
    set(&mut store, vi.mu.bias, &[0.0; 6]);
    let w = store.get(vi.classifier.weight).data().to_vec();
    let bias = uniform(&mut r, &[3], -0.5, 0.5).into_data();
    set(&mut store, vi.classifier.bias, &bias);
    set(&mut base_store, base.classifier.weight, &w);
    set(&mut base_store, base.classifier.bias, &bias);

    let batch = TokenBatch::from_texts(["a b c", "c d", "d a"], &vocab, 8).unwrap();
    let labels = [2, 0, 1];
    let mut tape = Tape::new();
    let out = encoder.forward(&mut tape, &store, &batch).unwrap();
    let joint = vi
        .loss_with_beta(&mut tape, &store, &out, &labels, 1.0, &mut Noise::Zero)
        .unwrap();
    let mut tape = Tape::new();
    let out = encoder.forward(&mut tape, &base_store, &batch).unwrap();
    let (ce, _) = base.loss(&mut tape, &base_store, &out, &labels).unwrap();
    assert!((joint.breakdown.ce - tape.scalar(ce).unwrap()).abs() < 1e-12);
}

#[test]
fn non_finite_hidden_state_is_a_numeric_error() {
    let mut tape = Tape::<f64>::new();
    let bad = Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
    assert!(matches!(tape.constant(&bad), Err(Error::Numeric(_))));
}

proptest! {
    #[test]
    fn kl_nonnegative(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..32)) {
        let (mu, lv): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(kl_to_standard_normal(&mu, &lv) >= -1e-6);
    }

    #[test]
    fn beta_monotone_and_clamped(total in 1usize..500, fraction in 0.0f64..1.5) {
        let mut prev = 0.0;
        for step in 0..=total + 5 {
            let b = anneal_beta(step, total, fraction);
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn combination_weights_on_simplex(logits in prop::collection::vec(-50.0f64..50.0, 2..12)) {
        let w = CombinationVector { logits: logits.clone() }.weights();
        prop_assert_eq!(w.len(), logits.len());
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
