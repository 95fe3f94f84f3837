mod support;

#[test]
fn operations_match_scalar_references() {
    for r in support::oracle_suite(100, 2024) {
        assert!(
            r.ok(),
            "{}: max error {:e} over {} instances (tolerance {:e})",
            r.name,
            r.max_err,
            r.instances,
            r.tol
        );
    }
}
