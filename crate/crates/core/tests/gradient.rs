mod common;

use boxadapt::uncertainty::AuEncoding;

#[test]
fn corner_format_gradients_match_finite_differences() {
    let r = common::gradcheck::gradient_check(AuEncoding::Corner, 20);
    println!("corner: checked {} skipped {} max rel {:.3e} ({})", r.checked, r.skipped, r.max_rel_error, r.worst);
    assert!(r.checked >= 20 * 12 * 3);
    assert!(r.max_rel_error <= 1e-4, "{}", r.worst);
}

#[test]
fn box_format_gradients_match_finite_differences() {
    let r = common::gradcheck::gradient_check(AuEncoding::Box, 10);
    println!("box: checked {} skipped {} max rel {:.3e} ({})", r.checked, r.skipped, r.max_rel_error, r.worst);
    assert!(r.max_rel_error <= 1e-4, "{}", r.worst);
}
