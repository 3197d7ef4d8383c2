//! Dispatch on randomly perturbed 33-bus operating points: every solve ends
//! optimal or infeasible, never in a solver error.

use gridflex::dispatch::{solve_dispatch, DispatchInput};
use gridflex::grid::NetworkModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_operating_points_are_settled() {
    let net = NetworkModel::ieee33();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut optimal, mut infeasible) = (0, 0);
    for k in 0..3000 {
        let scale = rng.gen_range(0.3..2.0);
        let mut inp = DispatchInput::nominal(&net, rng.gen_range(20.0..250.0));
        for (p, q) in inp.nodal_load_p.iter_mut().zip(inp.nodal_load_q.iter_mut()) {
            let f = scale * rng.gen_range(0.5..1.5);
            *p *= f;
            *q *= f;
        }
        for c in inp.res_cap.iter_mut() {
            *c *= if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..1.0) };
        }
        let sol = solve_dispatch(&inp).unwrap_or_else(|e| panic!("point {k}: {e}"));
        if sol.is_optimal() {
            optimal += 1;
            assert!(sol.balance_residual(&inp) <= 1e-7, "point {k}: {}", sol.balance_residual(&inp));
            assert!(sol.bound_violation(&inp) <= 1e-7, "point {k}: {}", sol.bound_violation(&inp));
        } else {
            infeasible += 1;
        }
    }
    // both outcomes are exercised
    assert!(optimal > 1000 && infeasible > 500, "{optimal} optimal, {infeasible} infeasible");
}
