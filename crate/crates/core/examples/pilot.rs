// Scratch pilot for calibration; removed before release.
use adverseg_core::gradcheck;
use adverseg_core::trainer::{self, AdvMode, SwaSetting, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("gradcheck");
    match mode {
        "gradcheck" => {
            let t = Instant::now();
            let outcomes = gradcheck::full_suite(1e-3, 1e-3).unwrap();
            for o in &outcomes {
                println!(
                    "{:<40} {:>12.3e} {}",
                    o.name,
                    o.max_rel_err,
                    if o.passed() { "PASS" } else { "FAIL" }
                );
            }
            println!("suite took {:.2?}", t.elapsed());
        }
        "smoke" => {
            let mut cfg = TrainConfig::default();
            cfg.n_iter = 300;
            cfg.batch = 8;
            cfg.eval_every = 50;
            if let Some(lr) = args.get(2) {
                cfg.lr_gen = lr.parse().unwrap();
            }
            if let Some(lr) = args.get(3) {
                cfg.lr_disc = lr.parse().unwrap();
            }
            let t = Instant::now();
            let out = trainer::train(&cfg).unwrap();
            for r in &out.runlog.records {
                println!(
                    "iter {:>5} gen {:.4} mce {:.4} adv {:.4} disc {:.4} miou {:.4} swa {:.4}",
                    r.iter, r.gen_loss, r.mce, r.adv, r.disc_loss, r.miou, r.miou_swa
                );
            }
            println!("300 iters took {:.2?}", t.elapsed());
        }
        "ablate" => {
            // Candidate acceptance config for the directional ablation;
            // remaining args are key=value overrides.
            let mut cfg = TrainConfig::default();
            cfg.n_iter = 2000;
            cfg.batch = 4;
            cfg.data_samples = 48;
            cfg.eval_samples = 24;
            cfg.noise_std = 0.35;
            cfg.eval_every = 0;
            let mut seeds: Vec<u64> = vec![42, 43, 44];
            for arg in &args[2..] {
                let (k, v) = arg.split_once('=').expect("key=value");
                if k == "seeds" {
                    seeds = v.split(',').map(|s| s.parse().unwrap()).collect();
                } else {
                    cfg.apply(k, v).unwrap();
                }
            }
            let t = Instant::now();
            for cond in [
                ("baseline", AdvMode::Off, false),
                ("pixelwise", AdvMode::Pixelwise, false),
                ("pixelwise+swa", AdvMode::Pixelwise, true),
            ] {
                let c = trainer::AblationCondition { name: cond.0, adv: cond.1, swa: cond.2 };
                let scores = trainer::run_condition(&cfg, &c, &seeds).unwrap();
                let mean: f64 = scores.iter().sum::<f64>() / scores.len() as f64;
                println!("{:<16} mean {:.4} scores {:?}", cond.0, mean, scores);
            }
            println!("3 conditions x 3 seeds took {:.2?}", t.elapsed());
        }
        other => eprintln!("unknown pilot mode {other}"),
    }
}
