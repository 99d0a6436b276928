//! Analytic gradients of the model, losses and critic against central
//! differences.

#[path = "support/gradcheck.rs"]
mod gradcheck;

#[test]
fn all_components_match_central_differences() {
    for r in gradcheck::suite(50) {
        println!("{}: worst {:.2e} over {} checks, {} kinks", r.name, r.worst, r.checks, r.kinks);
        assert!(r.passed(), "{r:?}");
    }
}
