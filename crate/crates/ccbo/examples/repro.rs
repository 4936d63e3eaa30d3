use ccbo::acquisition::{AcquisitionContext, SgSweep};
use ccbo::gp::condition;
use ccbo::measures::ConstraintModel;
use ccbo::point::JointPoint;
use ccbo::problems::problem_2d;
use ccbo::quadrature::UncertaintyQuadrature;
use ccbo::seed::SeedTree;
use ccbo::train::{default_template, train_with, TrainControl};
use ccbo::doe::{init_doe, lhs};

fn main() {
    let p = problem_2d();
    // 20 training points per constraint, shared (x,u)
    let doe = init_doe(&p, 20, 11);
    let space = p.objective_space();
    let pts: Vec<JointPoint> = doe.iter().map(|(x,u)| JointPoint::new(x.clone(), u.clone())).collect();
    let ctl = TrainControl { n_restarts: 10, ..TrainControl::default() };
    let mut models = Vec::new();
    for pi in 0..2 {
        let ys: Vec<f64> = doe.iter().map(|(x,u)| p.eval_constraint(pi,x,u).unwrap()).collect();
        let (spec, _) = train_with(&default_template(&space), &space, &pts, &ys, ctl, 100+pi as u64).unwrap();
        models.push(condition(&spec, &space, &pts, &ys).unwrap());
    }
    let f_ys: Vec<f64> = doe.iter().map(|(x,u)| p.eval_objective(x,u).unwrap()).collect();
    let (fs, _) = train_with(&default_template(&space), &space, &pts, &f_ys, ctl, 55).unwrap();
    let obj = condition(&fs, &space, &pts, &f_ys).unwrap();
    let cm = ConstraintModel::Independent(models);
    let quad = UncertaintyQuadrature::monte_carlo(&p.u_bounds, 100, 77);
    let cand_u = lhs(&p.u_bounds, 500, 33);
    let ctx = AcquisitionContext {
        objective: &obj, constraints: &cm, quad: &quad, alpha: 0.05,
        z_min_feas: 107244.0, candidate_x: &cand_u, candidate_u: &cand_u,
        n_traj: 200, k_samples: 500, seed: 3,
    };
    for x in [27.33f64, 32.0, 37.0] {
        let sweep = SgSweep::new(&ctx, &[x]).unwrap();
        let base = sweep.current_value().unwrap();
        let mut best = [(f64::INFINITY, 0.0); 2];
        for u in &cand_u {
            for pi in 0..2 {
                let v = sweep.value(u, Some(pi)).unwrap();
                if v < best[pi].0 { best[pi] = (v, u[0]); }
            }
        }
        println!("x={x:5.2}: base={base:.5}  g1 min={:.5} (u={:.1})  g2 min={:.5} (u={:.1})  -> pick g{}",
            best[0].0, best[0].1, best[1].0, best[1].1, if best[0].0 <= best[1].0 {1} else {2});
    }
}
