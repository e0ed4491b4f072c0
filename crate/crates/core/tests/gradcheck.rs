mod common;

use common::gradcheck::check_case;
use rendertime_core::util::rng_for;

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = rng_for(11, 0);
    for case in 0..20 {
        for (name, r) in check_case(&mut rng) {
            assert!(r.checked > 0);
            assert!(r.max_rel < 1e-4, "case {case} {name}: max rel err {:.3e}", r.max_rel);
        }
    }
}
