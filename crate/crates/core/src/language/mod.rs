//! The language branch: vocabulary, the RWKV-style model and its pretraining.

pub mod pretrain;
pub mod rwkv;
pub mod vocab;

pub use pretrain::{corpus_loss, entropy_floor, pretrain, PretrainReport};
pub use rwkv::{RecurrentState, Rwkv};
pub use vocab::{Vocabulary, BOS, EOS, PAD};

use crate::sim::{InstructionBank, Split};

/// Every training-split instruction over all colour assignments.
pub fn training_corpus() -> Vec<String> {
    InstructionBank::new().corpus(Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::tensor::{Graph, ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `y_t = (sum_{i<t} e^{k_i - (t-1-i) w} v_i + e^{u + k_t} v_t)
    ///       / (sum_{i<t} e^{k_i - (t-1-i) w} + e^{u + k_t})` summed directly.
    fn wkv_direct(k: &[f64], v: &[f64], w: f64, u: f64) -> Vec<f64> {
        (0..k.len())
            .map(|t| {
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..t {
                    let e = (k[i] - (t - 1 - i) as f64 * w).exp();
                    num += e * v[i];
                    den += e;
                }
                let e = (u + k[t]).exp();
                (num + e * v[t]) / (den + e)
            })
            .collect()
    }

    #[test]
    fn recurrent_wkv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (t, c) = (8, 3);
            let k: Vec<f64> = (0..t * c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..t * c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let decay: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..1.5)).collect();
            let first: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let store = ParamStore::new();
            let mut g: Graph<f64> = Graph::frozen(&store);
            let kv = g.constant(Tensor::new(&[1, t, c], k.clone()).unwrap());
            let vv = g.constant(Tensor::new(&[1, t, c], v.clone()).unwrap());
            let dv = g.constant(Tensor::new(&[c], decay.clone()).unwrap());
            let fv = g.constant(Tensor::new(&[c], first.clone()).unwrap());
            let y = g.wkv(kv, vv, dv, fv).unwrap();
            let y = g.value(y).data();
            for ch in 0..c {
                let kc: Vec<f64> = (0..t).map(|i| k[i * c + ch]).collect();
                let vc: Vec<f64> = (0..t).map(|i| v[i * c + ch]).collect();
                let direct = wkv_direct(&kc, &vc, decay[ch].exp(), first[ch]);
                for i in 0..t {
                    assert!((y[i * c + ch] - direct[i]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_sentence_is_memorised() {
        let vocab = Vocabulary::from_corpus(&["lift the red cube"]);
        let mut store = ParamStore::new();
        let cfg = Config::tiny();
        let lm = Rwkv::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg.lm, vocab.len()).unwrap();
        let corpus = vec![vocab.encode("lift the red cube").unwrap()];
        let mut pc = cfg.pretrain.clone();
        pc.epochs = 200;
        pc.lr = 1e-2;
        pc.max_excess_nats = 0.05;
        let report = pretrain(&lm, &mut store, &corpus, &pc).unwrap();
        assert!(report.final_loss < 0.05, "{report:?}");
        assert!(report.converged);
        let out = lm.greedy(&store, &[BOS, vocab.id("lift").unwrap()], EOS, None).unwrap();
        assert_eq!(vocab.decode(&out), "lift the red cube");
    }
}
