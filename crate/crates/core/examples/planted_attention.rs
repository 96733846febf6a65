//! Trains on a synthetic cohort and reports, per epoch, how the routed attention on STAS bags
//! splits between the planted satellite patches and the rest.
//!
//! `cargo run --release -p daem-core --example planted_attention -- [patients] [epochs] [seed]`

use daem_core::attribution::attribute;
use daem_core::dataset::{generate_synthetic, generate_synthetic_cohort, Label, SyntheticConfig};
use daem_core::numerics::SeededRng;
use daem_core::trainer::{Split, TrainConfig, TrainState, Trainer};

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn main() -> anyhow::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let patients = *args.first().unwrap_or(&20) as usize;
    let epochs = *args.get(1).unwrap_or(&30) as usize;
    let seed = *args.get(2).unwrap_or(&0);
    let syn = generate_synthetic(patients, &SyntheticConfig::default(), &mut SeededRng::new(seed))?;
    let val = generate_synthetic_cohort(10, &mut SeededRng::new(seed + 1000))?;
    let cfg = TrainConfig { epochs, seed, eval_train: false, ..TrainConfig::default() };
    let tr = Split::new(&syn.bags, cfg.model.knn_k)?;
    let va = Split::new(&val, cfg.model.knn_k)?;
    let trainer = Trainer::new(&cfg, &tr, &va)?;
    let mut state = TrainState::new(&cfg)?;
    trainer.run(&mut state, epochs, &mut |st, l| {
        let mut spread: f64 = 1.0;
        let mut small = Vec::new();
        let mut large = Vec::new();
        for (bag, plant) in syn.bags.iter().zip(&syn.planted) {
            if bag.label != Label::Stas {
                continue;
            }
            let a = attribute(bag, &st.params, &cfg.model)?;
            let raw = a.small.patches.iter().map(|p| p.raw);
            let (lo, hi) = raw.fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r), hi.max(r)));
            spread = spread.max(hi / lo);
            for (map, idx, out) in [(&a.small, &plant.small, &mut small), (&a.large, &plant.large, &mut large)] {
                let inside = mean(map.patches.iter().filter(|p| idx.contains(&p.index)).map(|p| p.raw));
                let outside = mean(map.patches.iter().filter(|p| !idx.contains(&p.index)).map(|p| p.raw));
                out.push(inside / outside);
            }
        }
        let score_norm: Vec<f64> =
            st.params.experts.iter().map(|e| e.score.data().iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        println!(
            "epoch {:3} |score| {:.3?} max/min 20x raw {:.3} loss {:.4} val_acc {:.2} planted/background 20x {:.3} (min {:.3}) 10x {:.3} (min {:.3})",
            l.epoch,
            score_norm,
            spread,
            l.train_loss,
            l.val_accuracy,
            mean(small.iter().copied()),
            small.iter().copied().fold(f64::INFINITY, f64::min),
            mean(large.iter().copied()),
            large.iter().copied().fold(f64::INFINITY, f64::min),
        );
        Ok(())
    })?;
    Ok(())
}
