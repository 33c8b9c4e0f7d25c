use rephrase::data::{encode_pairs, make_toy_corpus, ToyKind, Vocab};
use rephrase::model::{DimFix, ModelConfig, Seq2Seq};
use rephrase::tensor::Rng;
use rephrase::trainer::{train, TrainConfig};

fn subst_run(every: usize, seed: u64) -> (f64, f64) {
    let (tr, va) = make_toy_corpus(ToyKind::Substitution, 13, 4, 1000, 7).unwrap();
    let texts: Vec<&str> = tr.iter().chain(&va).flat_map(|p| [p.source.as_str(), p.target.as_str()]).collect();
    let vocab = Vocab::build(texts, 13).unwrap();
    let (trn, vl) = (encode_pairs(&vocab, &tr), encode_pairs(&vocab, &va));
    let cfg = TrainConfig {
        epochs: 10, batch_size: 8, initial_lr: 1.0, halve_every: 3,
        dropout_keep: 1.0, seed, max_grad_norm: None, ..TrainConfig::default()
    };
    let mcfg = ModelConfig { vocab_size: vocab.size(), hidden: 64, num_layers: 4, residual_every: every, dim_fix: DimFix::Pad, reverse_source: true };
    let mut model = Seq2Seq::<f64>::init(mcfg, &mut Rng::new(seed), 0.4, 1.0).unwrap();
    let report = train(&mut model, &trn, &vl, &cfg, 0, |_| {}).unwrap();
    (report.last_train_perplexity().unwrap(), report.last_valid_perplexity().unwrap())
}

fn main() {
    for every in [2usize, 0] {
        for seed in 1u64..=3 {
            let (t, v) = subst_run(every, seed);
            println!("every={every} seed={seed}: train={t:.4} valid={v:.4}");
        }
    }
}
