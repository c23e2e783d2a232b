//! Scratch probe: nominal branch loadings and embedding behaviour.

use gridembed::{case14, case30, encode_loads, nonzero_load_count, solve_acopf, EmbeddingConfig, SolverConfig};
use std::time::Instant;

fn main() {
    for (name, (net, loads)) in [("case14", case14()), ("case30", case30())] {
        let t0 = Instant::now();
        let res = solve_acopf(&net, &loads, &SolverConfig::default());
        println!(
            "== {name}: {:?} cost {:.4} in {:.2}s",
            res.status,
            res.cost,
            t0.elapsed().as_secs_f64()
        );
        let m = net.branches.len();
        for (k, br) in net.branches.iter().enumerate() {
            let s = res.point.flow[k].norm().max(res.point.flow[m + k].norm());
            println!(
                "  br {:>2}  {:>2}-{:<2}  |S| {:.4}  s_max {:.2}  util {:>5.1}%  suggest rateA {:.0}",
                k,
                net.buses[br.from].id,
                net.buses[br.to].id,
                s,
                br.s_max,
                100.0 * s / br.s_max,
                (1.6 * s * net.base_mva).max(15.0).ceil()
            );
        }

        let t1 = Instant::now();
        let cfg = EmbeddingConfig::default();
        match encode_loads(&net, &loads, &cfg) {
            Ok(out) => {
                let nz0 = nonzero_load_count(&loads, cfg.zero_tol);
                println!(
                    "  embed: converged={} iters={} nz {} -> {} in {:.2}s",
                    out.converged,
                    out.iterations,
                    nz0,
                    nonzero_load_count(&out.embedded, cfg.zero_tol),
                    t1.elapsed().as_secs_f64()
                );
                for row in &out.trace {
                    println!(
                        "    it {:>2}  gap {:?}  nz {}  beta_v {:.3} beta_s {:.3}",
                        row.iteration, row.cost_error, row.nonzero, row.beta_v, row.beta_s
                    );
                }
            }
            Err(e) => println!("  embed error: {e}"),
        }
    }
}
