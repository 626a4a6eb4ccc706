//! Finite-difference checks of every differentiable block and of the full
//! objective, in double precision.

mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    for (name, r) in common::gradient_suite() {
        assert!(r.checked > 0, "{name}: nothing checked");
        assert!(r.max_rel <= 1e-4, "{name}: max relative error {:.3e} over {} elements", r.max_rel, r.checked);
    }
}
