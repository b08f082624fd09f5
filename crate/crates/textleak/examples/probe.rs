//! Scratch diagnostic: whole-corpus short-target protocol (distinct targets).
//! Not part of the library surface.

use textleak::attack::{run_attack, AttackConfig};
use textleak::corpus::{stratified_split, Corpus};
use textleak::federated::{client_gradient, Batch};
use textleak::metrics::rouge;
use textleak::model::{init_params, BigramLm, ModelConfig, ModelKind};
use textleak::train::{train_classifier, TrainConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let corpus = Corpus::load("data/corpus.tsv").unwrap();
    let lengths: Vec<usize> = corpus.entries.iter().map(|e| e.ids.len()).collect();

    let all: Vec<usize> = (0..corpus.entries.len()).collect();
    let sentences = corpus.sentences(&all);


    let cfg = ModelConfig::desk(corpus.vocab.len());

    const CELLS: [(u64, u64, usize, u64, f64); 1] = [
        (0, 7, 5, 5, 0.1),
    ];

    for (sseed, iseed, epochs, tseed, smooth) in CELLS.iter().copied() {
        let _ = sseed;
        let mut rng = ChaCha8Rng::seed_from_u64(iseed);
        let lm = BigramLm::fit_smoothed(corpus.vocab.len(), &sentences, smooth);
        let split = stratified_split(&lengths, 0.15, 0.25, sseed);
        let train_data = corpus.labeled_seqs(&split.train);
        let mut pool: Vec<usize> = split
            .train
            .iter()
            .copied()
            .filter(|&i| (2..=4).contains(&corpus.entries[i].ids.len()))
            .collect();
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(42));
        let mut params = init_params(ModelKind::Classifier, &cfg, &mut rng).unwrap();
        if epochs > 0 {
            let tc = TrainConfig::new(epochs, tseed);
            train_classifier(&cfg, &mut params, &train_data, &tc).unwrap();
        }

        let mut exact = 0usize;
        let mut r1_sum = 0.0;
        let mut first20_exact = 0usize;
        let mut first20_r1 = 0.0;
        let mut misses: Vec<(usize, String, String)> = Vec::new();
        let n = 40usize.min(pool.len());
        for trial in 0..n {
            let idx = pool[trial % pool.len()];
            let entry = &corpus.entries[idx];
            let batch = Batch::new(vec![entry.ids.clone()], vec![entry.label]).unwrap();
            let grads = client_gradient(&cfg, &params, &batch).unwrap();
            let acfg = AttackConfig::lamp_cos().with_seed(trial as u64);
            let result = run_attack(
                &cfg,
                &params,
                &grads,
                &lm,
                &[entry.ids.len()],
                Some(&[entry.label]),
                &acfg,
            )
            .unwrap();
            let scores = rouge(&result.recovered[0], &entry.ids).unwrap();
            r1_sum += scores.r1;
            let ok = scores.r1 == 100.0 && scores.r2 == 100.0 && scores.rl == 100.0;
            if ok {
                exact += 1;
            } else {
                misses.push((
                    trial,
                    corpus.vocab.decode(&entry.ids),
                    corpus.vocab.decode(&result.recovered[0]),
                ));
            }
            if trial < 20 {
                first20_r1 += scores.r1;
                if ok {
                    first20_exact += 1;
                }
            }
        }
        println!(
            "ss {sseed} is {iseed} ep {epochs} ts {tseed} sm {smooth}: first20 {first20_exact}/20 R1 {:.1} | all{n} {exact}/{n} R1 {:.1}",
            first20_r1 / 20.0,
            r1_sum / n as f64
        );
        for (t, want, got) in &misses {
            println!("   t{t:>2} want {want:?} got {got:?}");
        }
    }
}
