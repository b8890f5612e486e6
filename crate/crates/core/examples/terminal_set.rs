//! Terminal cost, LQR gain and maximal invariant set for both loop modes.

use attitude_mpc::error_system::LoopMode;
use attitude_mpc::harness::config::ScenarioConfig;
use attitude_mpc::mpc::terminal_ingredients;
use attitude_mpc::reference::Reference;

fn main() {
    let scenario = ScenarioConfig::default().validate().expect("valid scenario");
    for mode in [LoopMode::Single, LoopMode::Dual] {
        let config = scenario.mpc_config(mode);
        let sample = scenario.reference.sample(config.n_steps as f64 * config.dt);
        let l_body = scenario.params.inertia() * sample.omega_d;
        let ti = terminal_ingredients(config, &scenario.params, &sample, &l_body).expect("terminal set exists");
        let (lo, hi) = ti.set.x_set.bounding_box().expect("bounded set");
        println!("{} loop", mode.as_str());
        println!("  closed-loop spectral radius {:.4}", ti.set.spectral_radius);
        println!("  P eigenvalues {:?}", ti.set.p.symmetric_eigenvalues().as_slice());
        println!("  invariant set rows {}", ti.set.x_set.rows());
        println!("  bounding box lo {:?}", lo.as_slice());
        println!("  bounding box hi {:?}", hi.as_slice());
    }
}
