//! Finite-difference gradient check of every parameter of the tiny model.

use supermoe::experiments::{grad_check_tiny, tiny_model_config};
use supermoe::gradcheck::GradCheckOptions;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let run = grad_check_tiny(&tiny_model_config(), 2, 8, 7, &GradCheckOptions::default())?;
    let r = &run.report;
    println!("parameters:        {}", run.parameters);
    println!("coordinates:       {} checked, {} skipped at kinks", r.checked, r.skipped_kinks);
    println!("max rel. error:    {:.3e} (tolerance {:.0e})", r.max_rel_error, r.tolerance);
    if let Some((name, i)) = &r.worst {
        println!("worst coordinate:  {name}[{i}]");
    }
    println!("seconds:           {:.1}", run.seconds);
    Ok(())
}
