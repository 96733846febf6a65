//! Trains on a synthetic cohort and prints the per-epoch log.
//!
//! `cargo run --release -p daem-core --example train_synthetic -- [patients] [epochs] [seed]`

use daem_core::dataset::generate_synthetic_cohort;
use daem_core::numerics::SeededRng;
use daem_core::trainer::{score_split, Split, TrainConfig, TrainState, Trainer};

fn main() -> anyhow::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let patients = *args.first().unwrap_or(&20) as usize;
    let epochs = *args.get(1).unwrap_or(&30) as usize;
    let seed = *args.get(2).unwrap_or(&0);
    let train = generate_synthetic_cohort(patients, &mut SeededRng::new(seed))?;
    let test = generate_synthetic_cohort(10, &mut SeededRng::new(seed + 1000))?;
    let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let tr = Split::new(&train, cfg.model.knn_k)?;
    let te = Split::new(&test, cfg.model.knn_k)?;
    let trainer = Trainer::new(&cfg, &tr, &te)?;
    let mut state = TrainState::new(&cfg)?;
    let t0 = std::time::Instant::now();
    trainer.run(&mut state, epochs, &mut |_, l| {
        println!(
            "epoch {:3} lr {:.2e} loss {:.4} (sc {:.4} mse {:.4} ce {:.4}) train_acc {:?} val_loss {:.4} val_acc {:.2} clip {} |g| {:.2}",
            l.epoch, l.lr, l.train_loss, l.train_supcon, l.train_mse, l.train_ce,
            l.train_accuracy, l.val_loss, l.val_accuracy, l.clipped_steps, l.max_grad_norm
        );
        Ok(())
    })?;
    let p = score_split(&state.params, &cfg.model, &te)?;
    println!("test probs {p:.3?}");
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
