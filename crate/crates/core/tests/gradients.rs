mod common;

use common::{composite_cases, fd_check, primitive_cases};

#[test]
fn primitives_match_central_differences() {
    for (name, inputs, f) in primitive_cases() {
        let r = fd_check(&inputs, &[], 1e-4, f);
        assert_eq!(r.straddled, 0, "{name}: probes straddle a kink");
        assert!(r.worst < 1e-4, "{name}: relative error {:e}", r.worst);
    }
}

#[test]
fn composite_losses_match_central_differences() {
    for case in composite_cases() {
        let r = fd_check(&case.inputs, &case.probes, 1e-4, case.f);
        println!("{}: {r:?}", case.name);
        assert!(r.worst < 1e-3, "{}: relative error {:e}", case.name, r.worst);
        assert!(
            r.straddled * 4 <= r.checked + r.straddled,
            "{}: {} of {} probes straddle a kink",
            case.name,
            r.straddled,
            r.checked + r.straddled
        );
    }
}
