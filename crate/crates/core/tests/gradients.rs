mod common;

#[test]
fn toy_network_gradients_match_central_differences() {
    for seed in [0, 1, 2] {
        for r in common::gradient_checks(seed, 1e-3, 24) {
            let c = &r.check;
            println!(
                "seed {seed} {:<20} checked {:>3} skipped {:>2} max rel err {:.2e}",
                c.name, c.checked, r.skipped_kinks, c.max_relative_error
            );
            assert!(c.checked > 0);
            assert!(c.max_relative_error < 1e-2, "{}: analytic {} vs numeric {} at {}", c.name, c.worst_analytic, c.worst_numeric, c.worst_index);
        }
    }
}
