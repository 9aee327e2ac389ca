//! Train an LSTM on the copy task with fixed and adaptive truncation.
//!
//! Defaults are small enough for a couple of minutes on one core; pass the
//! number of epochs and the training length to scale up.
//!
//! cargo run --release --example copy_training -- [epochs] [train_len]

use adaptive_tbptt::checkpoint;
use adaptive_tbptt::experiment::{init_model, ExperimentSpec, ModeName, Task};
use adaptive_tbptt::tasks::copy::gen_copy;
use adaptive_tbptt::trainer::{train, Split, TrainEvent};

fn main() -> adaptive_tbptt::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(5, |a| a.parse().expect("epochs"));
    let train_len: usize = args.next().map_or(32_000, |a| a.parse().expect("train_len"));

    for (mode, k) in [(ModeName::Fixed, 5), (ModeName::Fixed, 15), (ModeName::Adaptive, 15)] {
        let mut spec = ExperimentSpec::new(Task::CopyFixed);
        spec.seed = 1;
        spec.train.mode = mode;
        spec.train.k = k;
        spec.train.delta = 0.9;
        spec.train.epochs = epochs;
        spec.copy.train_len = train_len;
        spec.copy.valid_len = train_len / 4;
        spec.copy.test_len = train_len / 4;
        spec.validate()?;

        let [tc, vc, ec] = spec.copy_configs();
        let (tr, va, te) = (gen_copy(&tc)?, gen_copy(&vc)?, gen_copy(&ec)?);
        let label = match mode {
            ModeName::Fixed => format!("fixed K={k}"),
            ModeName::Adaptive => format!("adaptive delta={}", spec.train.delta),
        };
        println!("== {label}");
        let report = train(
            &spec.train_config(),
            init_model(&spec)?,
            Split { inputs: &tr.inputs, targets: &tr.targets },
            Split { inputs: &va.inputs, targets: &va.targets },
            Split { inputs: &te.inputs, targets: &te.targets },
            |event| {
                if let TrainEvent::Epoch(s) = event {
                    println!(
                        "epoch {:>3}  K={:>3}  loss {:.4}  valid {:.4}  test {:.4}  {:.1}s",
                        s.epoch, s.k, s.train_loss, s.valid_ppl, s.test_ppl, s.wallclock_s
                    );
                }
                Ok(())
            },
        )?;
        println!(
            "best valid {:.4} at epoch {}, test there {:.4}\n",
            report.best_valid_ppl, report.best_epoch, report.test_ppl_at_best
        );
        if mode == ModeName::Adaptive {
            checkpoint::save(&report.best_model, "copy_best.ckpt".as_ref())?;
            println!("saved copy_best.ckpt");
        }
    }
    Ok(())
}
