use aslip_core::collocation::{solve_min_effort, BoundaryConditions};
use aslip_core::model::{Params, State};
use aslip_core::nlp::SolverOptions;
use aslip_core::sim::{simulate_step, SimConfig, SimStatus};

fn main() {
    let params = Params::default();
    let opts = SolverOptions::default();
    let heights = [0.95, 1.0, 1.02, 1.05];
    let speeds = [0.4, 0.8, 1.2, 1.4, 1.6];
    let disturbances = [-0.10, -0.08];
    let mut solve_failures = 0;
    let mut tasks = 0;
    let mut falls = 0;
    for &h in &heights {
        for &v0 in &speeds {
            for &vf in &speeds {
                tasks += 1;
                let bc = BoundaryConditions {
                    start_height: h,
                    start_speed: v0,
                    end_height: h,
                    end_speed: vf,
                };
                let sol = match solve_min_effort(&params, &bc, [21, 41, 21], &opts) {
                    Ok(s) => s,
                    Err(_) => {
                        solve_failures += 1;
                        println!("SOLVE FAIL h={h} {v0}->{vf}");
                        continue;
                    }
                };
                for &d in &disturbances {
                    let start = State {
                        x: 0.0,
                        y: h,
                        xdot: v0,
                        ydot: 0.0,
                        r0: sol.plan.r0_init,
                        r0dot: sol.plan.r0dot_init,
                        rp: 0.0,
                    };
                    let cfg = SimConfig { ground_y: d, ..SimConfig::default() };
                    match simulate_step(&sol.plan, &start, &cfg) {
                        Ok(out) => {
                            if out.status != SimStatus::ApexReached {
                                falls += 1;
                                println!("FALL h={h} {v0}->{vf} d={d:+.2}: {:?}", out.status);
                            }
                        }
                        Err(e) => println!("SIM ERR h={h} {v0}->{vf} d={d:+.2}: {e}"),
                    }
                }
            }
        }
    }
    println!("tasks {tasks} solve_failures {solve_failures} falls {falls}");
}
