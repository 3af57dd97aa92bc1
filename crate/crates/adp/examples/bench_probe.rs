// Scratch: T-dependence at screened geometry (will be replaced).
use adp::attacks::{bpda, pgd, AttackConfig};
use adp::harness::desk_benchmark;
use adp::models::{argmax, conditioned_score};
use adp::numerics::RngStream;
use adp::purify::{ensemble_predict, PurifyConfig};

fn main() {
    let mut sums = vec![(0.0f64, 0.0f64, 0.0f64); 3]; // per T: rob, c6med, c6zero
    for seed in [7u64, 8, 9, 10, 11] {
        let b = desk_benchmark(seed).unwrap();
        let score = conditioned_score(&b.score_model, b.sigma_finest()).unwrap();
        let mut cfg = AttackConfig::new(b.threat);
        cfg.steps = 40;
        cfg.step_size = 2.5 * b.threat.epsilon / 40.0;
        let idx: Vec<usize> = adp::harness::evaluate::select_samples(b.dataset.len(), 80, 3);
        let eval_root = RngStream::derive(seed, 0xea11);
        let mut advs = Vec::new();
        let mut bare = 0;
        for &i in &idx {
            let x = b.dataset.features.row(i).to_owned();
            let y = b.dataset.labels[i];
            let res = pgd(&b.classifier, &x, y, &cfg).unwrap();
            bare += usize::from(argmax(&b.classifier.forward(&res.x_adv).unwrap()) == y);
            advs.push((i, res.x_adv, y));
        }
        print!("seed={seed} eps={:.2} bare={:.2}:", b.threat.epsilon, bare as f64 / idx.len() as f64);
        for (ti, t) in [10usize, 14, 18].iter().enumerate() {
            let pc = PurifyConfig { max_steps: *t, ..b.purify_config() };
            let mut rob = 0;
            let mut clean = 0;
            for (i, adv, y) in &advs {
                let stream = eval_root.substream(*i as u64);
                let x = b.dataset.features.row(*i).to_owned();
                clean += usize::from(ensemble_predict(&score, &b.classifier, &x, &pc, &stream).unwrap().label == *y);
                rob += usize::from(ensemble_predict(&score, &b.classifier, adv, &pc, &stream).unwrap().label == *y);
            }
            let mut c6 = [0usize; 2];
            for (ai, sig) in [pc.sigma, 0.0].iter().enumerate() {
                let arm = PurifyConfig { sigma: *sig, ..pc.clone() };
                let mut atk = cfg.clone();
                atk.eot_samples = 5;
                for &i in idx.iter().take(50) {
                    let x = b.dataset.features.row(i).to_owned();
                    let y = b.dataset.labels[i];
                    atk.seed = 1000 + i as u64;
                    let res = bpda(
                        |pt, rng| adp::purify::noisy_purify_run(&score, pt, &arm, rng),
                        &b.classifier, &x, y, &atk,
                    ).unwrap();
                    let stream = eval_root.substream(i as u64);
                    c6[ai] += usize::from(
                        ensemble_predict(&score, &b.classifier, &res.x_adv, &arm, &stream).unwrap().label == y,
                    );
                }
            }
            let rb = rob as f64 / advs.len() as f64;
            let cl = clean as f64 / advs.len() as f64;
            let m = c6[0] as f64 / 50.0;
            let z = c6[1] as f64 / 50.0;
            print!(" T{t}[cl={cl:.2} rob={rb:.2} med={m:.2} zero={z:.2}]");
            sums[ti].0 += rb - cl;
            sums[ti].1 += m;
            sums[ti].2 += z;
        }
        println!();
    }
    for (ti, t) in [10, 14, 18].iter().enumerate() {
        println!(
            "T{t}: avg rob-clean gap={:.1} pts; C6 med={:.3} zero={:.3} gap={:.1}",
            sums[ti].0 / 5.0 * 100.0, sums[ti].1 / 5.0, sums[ti].2 / 5.0,
            (sums[ti].1 - sums[ti].2) / 5.0 * 100.0
        );
    }
}
