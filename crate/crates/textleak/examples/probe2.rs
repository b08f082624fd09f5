//! Scratch probe: variant ordering, defense monotonicity, and B=2 capability
//! on the frozen fixture.

use std::time::Instant;

use textleak::attack::{run_attack, AttackConfig};
use textleak::corpus::{stratified_split, Corpus};
use textleak::federated::{apply_defense, client_gradient, Batch, DefenseConfig};
use textleak::metrics::{rouge, rouge_batch};
use textleak::model::{init_params, BigramLm, ModelConfig, ModelKind};
use textleak::train::{train_classifier, TrainConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn paired_se(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
    (var / d.len() as f64).sqrt()
}

fn main() {
    let corpus = Corpus::load("data/corpus.tsv").unwrap();
    let v = corpus.vocab.len();
    let cfg = ModelConfig::desk(v);
    let lengths: Vec<usize> = corpus.entries.iter().map(|e| e.ids.len()).collect();
    let split = stratified_split(&lengths, 0.15, 0.25, 0);
    let train_data = corpus.labeled_seqs(&split.train);
    let all: Vec<usize> = (0..corpus.entries.len()).collect();
    let lm = BigramLm::fit_smoothed(v, &corpus.sentences(&all), 0.1);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = init_params(ModelKind::Classifier, &cfg, &mut rng).unwrap();
    train_classifier(&cfg, &mut params, &train_data, &TrainConfig::new(5, 5)).unwrap();

    // Long-sequence pool for the variant/defense comparisons.
    let mut long_pool: Vec<usize> = split
        .train
        .iter()
        .copied()
        .filter(|&i| (6..=10).contains(&corpus.entries[i].ids.len()))
        .collect();
    long_pool.shuffle(&mut ChaCha8Rng::seed_from_u64(42));
    let n = 20.min(long_pool.len());
    println!("long pool: {} (using {n})", long_pool.len());

    let variants: &[(&str, AttackConfig, f64)] = &[
        ("lamp-cos", AttackConfig::lamp_cos(), 0.0),
        ("no-discrete", AttackConfig::lamp_cos().no_discrete(), 0.0),
        ("no-lm", AttackConfig::lamp_cos().no_lm(), 0.0),
        ("tag", AttackConfig::tag_baseline(), 0.0),
        ("dlg", AttackConfig::dlg_baseline(), 0.0),
        ("cos-sig1e-3", AttackConfig::lamp_cos(), 0.001),
        ("cos-sig2e-3", AttackConfig::lamp_cos(), 0.002),
    ];

    let mut table: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for (name, acfg, sigma) in variants {
        let t0 = Instant::now();
        let mut r1s = Vec::new();
        let mut r2s = Vec::new();
        for trial in 0..n {
            let entry = &corpus.entries[long_pool[trial]];
            let batch = Batch::new(vec![entry.ids.clone()], vec![entry.label]).unwrap();
            let mut grads = client_gradient(&cfg, &params, &batch).unwrap();
            if *sigma > 0.0 {
                grads = apply_defense(&grads, &DefenseConfig { sigma: *sigma, seed: trial as u64 });
            }
            let acfg = acfg.clone().with_seed(trial as u64);
            let res = run_attack(
                &cfg,
                &params,
                &grads,
                &lm,
                &[entry.ids.len()],
                Some(&[entry.label]),
                &acfg,
            )
            .unwrap();
            let sc = rouge(&entry.ids, &res.recovered[0]).unwrap();
            r1s.push(sc.r1);
            r2s.push(sc.r2);
        }
        println!(
            "{name:>12}: R1 {:.1} R2 {:.1}  ({:.1}s)",
            mean(&r1s),
            mean(&r2s),
            t0.elapsed().as_secs_f64()
        );
        table.push((name.to_string(), r1s, r2s));
    }

    let r2_of = |name: &str| &table.iter().find(|(n, _, _)| n == name).unwrap().2;
    let cos = r2_of("lamp-cos");
    for other in ["no-discrete", "no-lm", "tag", "dlg"] {
        let o = r2_of(other);
        let margin = mean(cos) - mean(o);
        let se = paired_se(cos, o);
        println!("cos vs {other:>12}: margin {margin:+.2} (paired SE {se:.2}) -> {}",
            if margin > se { "PASS" } else { "FAIL" });
    }
    let (s0, s1, s2) = (r2_of("lamp-cos"), r2_of("cos-sig1e-3"), r2_of("cos-sig2e-3"));
    println!(
        "defense: {:.1} >= {:.1} >= {:.1} (SE01 {:.2}, SE12 {:.2})",
        mean(s0), mean(s1), mean(s2), paired_se(s0, s1), paired_se(s1, s2)
    );

    // B=2 capability on the criterion-5 short pool.
    let mut short_pool: Vec<usize> = split
        .train
        .iter()
        .copied()
        .filter(|&i| (2..=4).contains(&corpus.entries[i].ids.len()))
        .collect();
    short_pool.shuffle(&mut ChaCha8Rng::seed_from_u64(42));
    let picks: Vec<usize> = short_pool[..20].to_vec();
    let mut b1 = Vec::new();
    for (trial, &i) in picks.iter().enumerate() {
        let e = &corpus.entries[i];
        let batch = Batch::new(vec![e.ids.clone()], vec![e.label]).unwrap();
        let grads = client_gradient(&cfg, &params, &batch).unwrap();
        let acfg = AttackConfig::lamp_cos().with_seed(trial as u64);
        let res =
            run_attack(&cfg, &params, &grads, &lm, &[e.ids.len()], Some(&[e.label]), &acfg)
                .unwrap();
        b1.push(rouge(&e.ids, &res.recovered[0]).unwrap().r1);
    }
    let mut b2 = Vec::new();
    for (trial, pair) in picks.chunks(2).enumerate() {
        let (ea, eb) = (&corpus.entries[pair[0]], &corpus.entries[pair[1]]);
        let batch =
            Batch::new(vec![ea.ids.clone(), eb.ids.clone()], vec![ea.label, eb.label]).unwrap();
        let grads = client_gradient(&cfg, &params, &batch).unwrap();
        let acfg = AttackConfig::lamp_cos().with_seed(trial as u64);
        let res = run_attack(
            &cfg,
            &params,
            &grads,
            &lm,
            &[ea.ids.len(), eb.ids.len()],
            Some(&[ea.label, eb.label]),
            &acfg,
        )
        .unwrap();
        let refs = vec![ea.ids.clone(), eb.ids.clone()];
        let cands: Vec<Vec<u32>> = res
            .recovered
            .iter()
            .zip(&res.lengths)
            .map(|(r, &l)| r[..l].to_vec())
            .collect();
        b2.push(rouge_batch(&refs, &cands).unwrap().r1);
    }
    println!("B=1 mean R1 {:.1} | B=2 mean R1 {:.1} | ratio {:.2}", mean(&b1), mean(&b2), mean(&b2) / mean(&b1));
}
