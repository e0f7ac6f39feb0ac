use relcon::corpus::vocab::{CLS, E1_END, E1_START, E2_END, E2_START, MASK, RESERVED, SEP};
use relcon::encoder::*;
use relcon::losses::mlm_loss;
use relcon::rng::{derive, normal_tensor, Stream};
use relcon::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};

const W: usize = RESERVED.len();

fn config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: W + 20,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 32,
        max_seq_len: 16,
        init_std: 0.2,
        ..EncoderConfig::default()
    }
}

fn sentences() -> (Vec<Vec<usize>>, Vec<(usize, usize)>) {
    let a = vec![CLS, W, E1_START, W + 1, E1_END, W + 2, E2_START, W + 3, E2_END, SEP];
    let b = vec![CLS, E2_START, W + 4, E2_END, W + 5, E1_START, W + 6, E1_END, SEP];
    (vec![a, b], vec![(2, 6), (5, 1)])
}

fn labels() -> Vec<Vec<usize>> {
    vec![vec![CLS, W + 7, W + 8, SEP, W + 9, SEP], vec![CLS, W + 10, SEP, W + 11, W + 12, SEP]]
}

fn embed(m: &BiEncoder) -> (Vec<Embedding2d>, Vec<Embedding2d>) {
    let (s, mk) = sentences();
    (m.embed_sentences(&s, &mk, 8).unwrap(), m.embed_labels(&labels(), 8).unwrap())
}

fn perturb(m: &mut BiEncoder, prefix: &str) {
    let ids: Vec<_> = m.store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(i, _)| i).collect();
    assert!(!ids.is_empty());
    for id in ids {
        for x in m.store.value_mut(id).data_mut() {
            *x += 0.05;
        }
    }
}

#[test]
fn encoders_are_decoupled() {
    let base = BiEncoder::new(config(), 1, 0.07).unwrap();
    let (s0, l0) = embed(&base);

    let mut m = base.clone();
    perturb(&mut m, LABEL_PREFIX);
    let (s1, l1) = embed(&m);
    assert_eq!(s0, s1);
    assert_ne!(l0, l1);

    let mut m = base.clone();
    perturb(&mut m, SENTENCE_PREFIX);
    let (s2, l2) = embed(&m);
    assert_ne!(s0, s2);
    assert_eq!(l0, l2);
}

#[test]
fn label_pooling_is_linear() {
    let mut rng = derive(3, Stream::Check, &[]);
    let tokens = &labels()[0];
    let states = normal_tensor(&mut rng, tokens.len(), 8, 1.0);
    let p = pool_label(&HiddenStates::from_tokens(states.clone(), tokens).unwrap()).unwrap();
    for alpha in [-2.0, 0.5, 3.25] {
        let scaled = HiddenStates::from_tokens(states.map(|x| alpha * x), tokens).unwrap();
        let q = pool_label(&scaled).unwrap();
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            assert!((alpha * a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn sentence_pooling_is_a_projection() {
    let (s, _) = sentences();
    let tokens = &s[1];
    let states = Tensor::from_rows(&(0..tokens.len()).map(|i| vec![i as f64, -(i as f64)]).collect::<Vec<_>>())
        .unwrap();
    let h = HiddenStates::from_tokens(states, tokens).unwrap();
    assert_eq!(h.entity_starts, Some((5, 1)));
    assert_eq!(pool_sentence(&h).unwrap().as_slice(), &[5.0, -5.0, 1.0, -1.0]);
}

/// Hidden states as a leaf, so their gradient is observable.
fn hidden_grad(pool: impl Fn(&mut Graph, &EncodedBatch) -> relcon::Result<relcon::tensor::Var>, rows: usize) -> Tensor {
    let mut store = ParamStore::new();
    let mut rng = derive(9, Stream::Check, &[]);
    let h = store.add("h", normal_tensor(&mut rng, rows, 6, 1.0)).unwrap();
    let w = normal_tensor(&mut rng, 1, 12, 1.0);
    let mut g = Graph::new();
    let hidden = g.param(&store, h);
    let batch = EncodedBatch {
        hidden,
        ranges: std::iter::once(0..rows).collect(),
    };
    let pooled = pool(&mut g, &batch).unwrap();
    let w = g.constant(w);
    let prod = g.mul(pooled, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss, &mut store).unwrap();
    store.grad(h).clone()
}

fn row_nonzero(t: &Tensor, r: usize) -> bool {
    t.row_slice(r).iter().any(|&x| x != 0.0)
}

#[test]
fn gradients_reach_both_halves() {
    let seq = labels()[0].clone();
    let g = hidden_grad(|g, b| pool_label_batch(g, b, std::slice::from_ref(&seq)), seq.len());
    assert!(row_nonzero(&g, 0), "CLS half");
    for r in [1, 2, 4] {
        assert!(row_nonzero(&g, r), "content row {r}");
    }
    assert!(!row_nonzero(&g, 3) && !row_nonzero(&g, 5), "separators carry no gradient");

    let (s, mk) = sentences();
    let g = hidden_grad(|g, b| pool_sentence_batch(g, b, &mk[..1]), s[0].len());
    assert!(row_nonzero(&g, 2) && row_nonzero(&g, 6));
    assert_eq!((0..s[0].len()).filter(|&r| row_nonzero(&g, r)).count(), 2);
}

#[test]
fn gradients_flow_into_both_encoders() {
    let m = BiEncoder::new(config(), 2, 0.07).unwrap();
    let mut store = m.store.clone();
    let (s, mk) = sentences();
    let mut g = Graph::new();
    let se = m.sentence.encode_batch(&mut g, &store, &s).unwrap();
    let sp = pool_sentence_batch(&mut g, &se, &mk).unwrap();
    let le = m.label.encode_batch(&mut g, &store, &labels()).unwrap();
    let lp = pool_label_batch(&mut g, &le, &labels()).unwrap();
    let cos = relcon::losses::cosine_similarity_matrix(&mut g, sp, lp).unwrap();
    let loss = g.sum(cos);
    g.backward(loss, &mut store).unwrap();
    for prefix in [LABEL_PREFIX, SENTENCE_PREFIX] {
        let id = store.id(&format!("{prefix}.layer1.ffn.w2")).unwrap();
        assert!(store.grad(id).data().iter().any(|&x| x != 0.0), "{prefix}");
    }
}

#[test]
fn mlm_head_memorizes_one_sentence() {
    // Six tokens, each masked in its own copy of the sentence.
    let sentence: Vec<usize> = (0..6).map(|i| W + i).collect();
    let copies: Vec<Vec<usize>> = (0..6)
        .map(|i| {
            let mut s = sentence.clone();
            s[i] = MASK;
            s
        })
        .collect();
    let mut store = ParamStore::new();
    let enc = Encoder::register(&mut store, "s", config(), &mut derive(0, Stream::Init, &[0])).unwrap();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 2e-2,
            ..AdamWConfig::default()
        },
        &store,
    );
    let mut loss_value = f64::INFINITY;
    for _ in 0..20 {
        let mut g = Graph::new();
        let b = enc.encode_batch(&mut g, &store, &copies).unwrap();
        let rows: Vec<usize> = b.ranges.iter().enumerate().map(|(i, r)| r.start + i).collect();
        let logits = enc.mlm_logits(&mut g, &store, b.hidden, &rows).unwrap();
        let loss = mlm_loss(&mut g, logits, &sentence).unwrap();
        loss_value = g.value(loss).item();
        g.backward(loss, &mut store).unwrap();
        opt.step(&mut store).unwrap();
    }
    let mut g = Graph::new();
    let b = enc.encode_batch(&mut g, &store, &copies).unwrap();
    let rows: Vec<usize> = b.ranges.iter().enumerate().map(|(i, r)| r.start + i).collect();
    let logits = enc.mlm_logits(&mut g, &store, b.hidden, &rows).unwrap();
    let after = mlm_loss(&mut g, logits, &sentence).unwrap();
    let after = g.value(after).item();
    assert!(after < 0.1, "MLM loss {after} (last step {loss_value})");
}
