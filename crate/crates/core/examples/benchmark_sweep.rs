//! A reduced horizon and condensing sweep over a short replayed run.

use attitude_mpc::harness::benchmark::{run_benchmark, BenchmarkPlan};
use attitude_mpc::harness::config::{BlockSpec, ScenarioConfig};

fn main() {
    let mut config = ScenarioConfig::default();
    config.benchmark.replay_duration_s = Some(2.0);
    let scenario = config.validate().expect("valid scenario");
    let mut plan = BenchmarkPlan::from_scenario(&scenario);
    plan.horizons = vec![10, 20];
    plan.blocks = vec![BlockSpec::Size(1), BlockSpec::full()];
    plan.reps = 1;
    let report = run_benchmark(&scenario, &plan).expect("benchmark runs");
    println!("cell                               prep[s]    solve[s]   failures");
    for cell in &report.cells {
        let s = cell.stats();
        println!("{:32}  {:.3e}  {:.3e}  {}", cell.cell.name(), s.prep_geomean, s.solve_geomean, s.failures);
    }
    println!("\nfastest per mode and horizon:");
    for cell in report.best_cells() {
        println!("  {}", cell.cell.name());
    }
}
