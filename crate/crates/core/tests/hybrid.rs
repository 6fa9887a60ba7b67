mod common;

use common::criteria::{flow_off_deviation, zero_cell_deviation};

#[test]
fn zero_flow_reproduces_discrete_gcgru_bit_exactly() {
    let (worst, mismatched) = flow_off_deviation(20);
    assert_eq!(mismatched, 0, "max deviation {worst:e}");
}

#[test]
fn zero_cell_halves_the_state() {
    assert_eq!(zero_cell_deviation(50), 0.0);
}
