//! Skeleton generator: insertion/deletion word bags, the edit vector, and a
//! keep probability for every token of the retrieved response.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::ModelError;
use crate::layers::{additive_attend, BiEncoder, GruCell, Linear, INIT_BOUND};
use crate::text::{mask_tokens, TokenSeq, Vocab};

/// Words of the query missing from the retrieved query (`insert`) and the reverse (`delete`).
/// Each bag lists distinct tokens in order of first occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WordBags {
    pub insert: TokenSeq,
    pub delete: TokenSeq,
}

fn set_minus(a: &[String], b: &[String]) -> TokenSeq {
    let exclude: HashSet<&str> = b.iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    a.iter().filter(|t| !exclude.contains(t.as_str()) && seen.insert(t.as_str())).cloned().collect()
}

pub fn word_bags(q: &[String], rq: &[String]) -> WordBags {
    WordBags { insert: set_minus(q, rq), delete: set_minus(rq, q) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkeletonConfig {
    pub emb: usize,
    pub hidden: usize,
    pub layers: usize,
    /// width of the additive-attention hidden layer
    pub attn: usize,
    pub dropout: f64,
}

/// Vocabulary ids of one skeleton-generator input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonInput {
    pub insert: Vec<usize>,
    pub delete: Vec<usize>,
    pub rr: Vec<usize>,
}

impl SkeletonInput {
    pub fn new(vocab: &Vocab, q: &[String], rq: &[String], rr: &[String]) -> Self {
        let bags = word_bags(q, rq);
        Self { insert: vocab.encode(&bags.insert), delete: vocab.encode(&bags.delete), rr: vocab.encode(rr) }
    }
}

/// Everything the forward pass exposes to losses and to the joint decoder.
#[derive(Debug, Clone)]
pub struct SkeletonPass {
    /// biGRU slots over the retrieved response
    pub slots: Vec<Var>,
    pub edit: Var,
    /// pre-sigmoid keep scores, one scalar per token
    pub logits: Vec<Var>,
    pub insert_weights: Option<Var>,
    pub delete_weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct SkeletonGenerator {
    cfg: SkeletonConfig,
    embedding: ParamId,
    encoder: BiEncoder<GruCell>,
    v_ins: ParamId,
    w_ins: ParamId,
    v_del: ParamId,
    w_del: ParamId,
    mask: Linear,
}

impl SkeletonGenerator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        vocab_size: usize,
        cfg: SkeletonConfig,
    ) -> Result<Self, ModelError> {
        if cfg.layers == 0 || cfg.hidden == 0 || cfg.emb == 0 || cfg.attn == 0 {
            return Err(ModelError::Config("skeleton generator sizes must be positive".into()));
        }
        let embedding = store.uniform(format!("{prefix}.emb"), &[vocab_size, cfg.emb], INIT_BOUND, rng)?;
        let encoder =
            BiEncoder::gru(store, rng, &format!("{prefix}.enc"), cfg.emb, cfg.hidden, cfg.layers, cfg.dropout)?;
        let slot = encoder.slot_dim();
        let att_in = cfg.emb + slot;
        Ok(Self {
            cfg,
            embedding,
            encoder,
            v_ins: store.uniform(format!("{prefix}.ins.v"), &[cfg.attn], INIT_BOUND, rng)?,
            w_ins: store.uniform(format!("{prefix}.ins.w"), &[cfg.attn, att_in], INIT_BOUND, rng)?,
            v_del: store.uniform(format!("{prefix}.del.v"), &[cfg.attn], INIT_BOUND, rng)?,
            w_del: store.uniform(format!("{prefix}.del.w"), &[cfg.attn, att_in], INIT_BOUND, rng)?,
            mask: Linear::new(store, rng, &format!("{prefix}.mask"), slot + 2 * cfg.emb, 1, true)?,
        })
    }

    pub fn config(&self) -> &SkeletonConfig {
        &self.cfg
    }

    pub fn slot_dim(&self) -> usize {
        self.encoder.slot_dim()
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    /// The mask head's weight and bias, which feed only the keep probabilities.
    pub fn mask_head(&self) -> (ParamId, Option<ParamId>) {
        (self.mask.w, self.mask.b)
    }

    fn embed(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Vec<Var>, ModelError> {
        let table = tape.param(self.embedding);
        ids.iter().map(|&i| Ok(tape.embedding(table, i)?)).collect()
    }

    fn bag(
        &self,
        tape: &mut Tape<'_>,
        ids: &[usize],
        key: Var,
        v: ParamId,
        w: ParamId,
    ) -> Result<(Var, Option<Var>), ModelError> {
        if ids.is_empty() {
            return Ok((tape.constant(Tensor::zeros(&[self.cfg.emb])), None));
        }
        let members = self.embed(tape, ids)?;
        let (v, w) = (tape.param(v), tape.param(w));
        let att = additive_attend(tape, &members, key, v, w)?;
        Ok((att.context, Some(att.weights)))
    }

    /// Insertion-bag summary ⊕ deletion-bag summary, attended with `key`.
    /// An empty bag contributes zeros.
    pub fn edit_vector(
        &self,
        tape: &mut Tape<'_>,
        insert: &[usize],
        delete: &[usize],
        key: Var,
    ) -> Result<(Var, Option<Var>, Option<Var>), ModelError> {
        let (zi, wi) = self.bag(tape, insert, key, self.v_ins, self.w_ins)?;
        let (zd, wd) = self.bag(tape, delete, key, self.v_del, self.w_del)?;
        Ok((tape.concat(&[zi, zd])?, wi, wd))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, input: &SkeletonInput) -> Result<SkeletonPass, ModelError> {
        let xs = self.embed(tape, &input.rr)?;
        let xs: Vec<Var> = xs.into_iter().map(|x| tape.dropout(x, self.cfg.dropout)).collect();
        let enc = self.encoder.encode(tape, &xs)?;
        let key = *enc.slots.last().expect("encoder rejects empty input");
        let (edit, insert_weights, delete_weights) = self.edit_vector(tape, &input.insert, &input.delete, key)?;
        let mut logits = Vec::with_capacity(enc.slots.len());
        for &h in &enc.slots {
            let x = tape.concat(&[h, edit])?;
            let x = tape.dropout(x, self.cfg.dropout);
            let a = self.mask.forward(tape, x)?;
            logits.push(tape.pick(a, 0)?);
        }
        Ok(SkeletonPass { slots: enc.slots, edit, logits, insert_weights, delete_weights })
    }

    /// Σ_i log P(m_i) of the given labels under the pass.
    pub fn label_log_prob(&self, tape: &mut Tape<'_>, pass: &SkeletonPass, labels: &[u8]) -> Result<Var, ModelError> {
        if labels.len() != pass.logits.len() {
            return Err(ModelError::LengthMismatch {
                what: "skeleton labels",
                expected: pass.logits.len(),
                got: labels.len(),
            });
        }
        let terms: Vec<Var> = pass
            .logits
            .iter()
            .zip(labels)
            .map(|(&a, &m)| {
                // log P(m=0) = log σ(-a)
                let signed = if m == 1 { a } else { tape.neg(a) };
                tape.log_sigmoid(signed)
            })
            .collect();
        Ok(tape.add_all(&terms)?)
    }

    /// Keep probabilities on an evaluation tape. Empty `rr` gives an empty list.
    pub fn mask_probs(&self, store: &ParamStore, input: &SkeletonInput) -> Result<Vec<f64>, ModelError> {
        if input.rr.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(store);
        let pass = self.forward(&mut tape, input)?;
        Ok(probs(&tape, &pass))
    }
}

/// Reads the keep probabilities off a finished pass.
pub fn probs(tape: &Tape<'_>, pass: &SkeletonPass) -> Vec<f64> {
    pass.logits.iter().map(|&a| crate::autodiff::sigmoid(tape.item(a))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskMode {
    /// keep iff p ≥ τ
    Threshold(f64),
    Sample,
}

/// Turns keep probabilities into labels, returning Σ_i log P(m_i) alongside.
pub fn decide_mask<R: Rng + ?Sized>(probs: &[f64], mode: MaskMode, rng: &mut R) -> (Vec<u8>, f64) {
    let labels: Vec<u8> = probs
        .iter()
        .map(|&p| match mode {
            MaskMode::Threshold(tau) => u8::from(p >= tau),
            MaskMode::Sample => u8::from(rng.gen::<f64>() < p),
        })
        .collect();
    let lp = probs.iter().zip(&labels).map(|(&p, &m)| if m == 1 { p.ln() } else { (1.0 - p).ln() }).sum();
    (labels, lp)
}

/// Deterministic labels: keep iff p ≥ `tau`.
pub fn threshold_mask(probs: &[f64], tau: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= tau)).collect()
}

pub fn apply_mask(rr: &[String], labels: &[u8]) -> Result<TokenSeq, ModelError> {
    mask_tokens(rr, labels).ok_or(ModelError::LengthMismatch {
        what: "apply_mask",
        expected: rr.len(),
        got: labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheck};
    use crate::text::{tokenize, BLANK};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(s: &str) -> TokenSeq {
        tokenize(s, false)
    }

    fn cfg() -> SkeletonConfig {
        SkeletonConfig { emb: 4, hidden: 3, layers: 1, attn: 5, dropout: 0.0 }
    }

    fn model(store: &mut ParamStore) -> SkeletonGenerator {
        SkeletonGenerator::new(store, &mut ChaCha8Rng::seed_from_u64(3), "ske", 12, cfg()).unwrap()
    }

    #[test]
    fn bags_from_the_banana_example() {
        let b = word_bags(&t("do you like banana"), &t("do you like apple"));
        assert_eq!(b.insert, vec!["banana"]);
        assert_eq!(b.delete, vec!["apple"]);
        assert_eq!(word_bags(&t("a b"), &t("b a")), WordBags::default());
        let b = word_bags(&t("a"), &[]);
        assert_eq!((b.insert, b.delete), (vec!["a".to_string()], vec![]));
        let b = word_bags(&t("x y x z"), &t("z"));
        assert_eq!(b.insert, vec!["x", "y"]);
    }

    #[test]
    fn swapping_queries_swaps_bags() {
        let (q, rq) = (t("i like red tea"), t("you like green tea"));
        let (a, b) = (word_bags(&q, &rq), word_bags(&rq, &q));
        assert_eq!((a.insert, a.delete), (b.delete, b.insert));
    }

    #[test]
    fn singleton_bags_give_raw_embeddings() {
        let mut store = ParamStore::new();
        let m = model(&mut store);
        let mut tape = Tape::new(&store);
        let key = tape.constant(Tensor::vector(vec![0.3; 6]));
        let (z, wi, wd) = m.edit_vector(&mut tape, &[5], &[7], key).unwrap();
        let table = store.tensor(m.embedding);
        let expect: Vec<f64> = table.row(5).iter().chain(table.row(7)).copied().collect();
        assert_eq!(tape.value(z).data(), expect.as_slice());
        assert_eq!(tape.value(wi.unwrap()).data(), &[1.0]);
        assert_eq!(tape.value(wd.unwrap()).data(), &[1.0]);
        let (z, wi, wd) = m.edit_vector(&mut tape, &[], &[], key).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0; 8]);
        assert!(wi.is_none() && wd.is_none());
        let (_, wi, _) = m.edit_vector(&mut tape, &[5, 6, 9], &[], key).unwrap();
        assert!((tape.value(wi.unwrap()).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_model_gives_half() {
        let mut store = ParamStore::new();
        let m = model(&mut store);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let input = SkeletonInput { insert: vec![5], delete: vec![], rr: vec![5, 6, 7, 8, 9] };
        assert_eq!(m.mask_probs(&store, &input).unwrap(), vec![0.5; 5]);
        let empty = SkeletonInput { rr: vec![], ..input };
        assert!(m.mask_probs(&store, &empty).unwrap().is_empty());
    }

    #[test]
    fn probabilities_are_open_interval() {
        let mut store = ParamStore::new();
        let m = model(&mut store);
        let input = SkeletonInput { insert: vec![1, 2], delete: vec![3], rr: vec![5, 6, 7] };
        let p = m.mask_probs(&store, &input).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn decide_mask_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(decide_mask(&[0.9, 0.1], MaskMode::Threshold(0.5), &mut rng).0, vec![1, 0]);
        assert_eq!(decide_mask(&[0.5], MaskMode::Threshold(0.5), &mut rng).0, vec![1]);
        assert_eq!(decide_mask(&[1.0, 1.0, 1.0], MaskMode::Sample, &mut rng), (vec![1, 1, 1], 0.0));
        for _ in 0..10 {
            let (_, lp) = decide_mask(&[0.5, 0.5], MaskMode::Sample, &mut rng);
            assert_eq!(lp, 2.0 * 0.5f64.ln());
        }
        let a = decide_mask(&[0.3, 0.6, 0.2, 0.8], MaskMode::Sample, &mut ChaCha8Rng::seed_from_u64(9));
        let b = decide_mask(&[0.3, 0.6, 0.2, 0.8], MaskMode::Sample, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn apply_mask_cases() {
        let rr = t("yes apple is my favorite");
        assert_eq!(apply_mask(&rr, &[1; 5]).unwrap(), rr);
        assert_eq!(apply_mask(&rr, &[0; 5]).unwrap(), vec![BLANK; 5]);
        assert_eq!(apply_mask(&rr, &[1, 0, 1, 1, 1]).unwrap(), t(&format!("yes {BLANK} is my favorite")));
        assert!(matches!(apply_mask(&rr, &[1]), Err(ModelError::LengthMismatch { .. })));
    }

    #[test]
    fn label_log_prob_gradients() {
        let mut store = ParamStore::new();
        let m = SkeletonGenerator::new(
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(5),
            "ske",
            10,
            SkeletonConfig { emb: 3, hidden: 2, layers: 2, attn: 3, dropout: 0.3 },
        )
        .unwrap();
        let input = SkeletonInput { insert: vec![5, 6], delete: vec![7], rr: vec![5, 8, 9] };
        let opts = GradCheck { dropout_seed: Some(1), ..GradCheck::default() };
        let report = grad_check(&mut store, &opts, |tape| {
            let pass = m.forward(tape, &input)?;
            let lp = m.label_log_prob(tape, &pass, &[1, 0, 1])?;
            Ok::<_, ModelError>(tape.neg(lp))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
