//! Fixed uniform task weights against bi-level weight optimisation on the
//! conflict dataset, paired over seeds.

use supermoe::experiments::{seesaw, SeesawConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let r = seesaw(&SeesawConfig::default())?;
    for s in &r.seeds {
        println!(
            "seed {}: uniform {:.4} {:?}  bilevel {:.4} {:?}  lambda {:.3?}",
            s.seed,
            s.uniform.mean_val_auc(),
            s.uniform.val_auc,
            s.bilevel.mean_val_auc(),
            s.bilevel.val_auc,
            s.bilevel.final_lambda
        );
    }
    let (u, b) = r.mean_val_auc();
    let (tu, tb) = r.mean_test_auc();
    println!("validation AUC: uniform {u:.4}  bilevel {b:.4}  gain {:+.4}", b - u);
    println!("test AUC:       uniform {tu:.4}  bilevel {tb:.4}  gain {:+.4}", tb - tu);
    println!("seconds: {:.1}", r.seconds);
    Ok(())
}
