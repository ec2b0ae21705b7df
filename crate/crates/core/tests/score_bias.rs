//! Monte Carlo check of the analytic score-bias terms.

mod common;

use common::criteria;

#[test]
fn mean_raw_score_equals_bias_term() {
    eprintln!("{}", criteria::score_bias(criteria::BIAS_DRAWS));
}
