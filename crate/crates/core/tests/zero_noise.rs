//! Without privacy noise the corrected estimators are the classical ones.

mod common;

use common::criteria;

#[test]
fn corrected_estimators_reduce_without_noise() {
    eprintln!("{}", criteria::zero_noise(20));
}
