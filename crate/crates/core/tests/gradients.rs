mod common;

use common::{FAMILIES, REL_TOL};

#[test]
fn finite_differences_agree() {
    for (name, instance, count) in FAMILIES {
        for i in 0..count as u64 {
            let (worst, checked) = instance(1000 + i);
            assert!(checked > 0, "{name} instance {i} checked nothing");
            assert!(worst <= REL_TOL, "{name} instance {i}: relative error {worst:e}");
        }
    }
}
