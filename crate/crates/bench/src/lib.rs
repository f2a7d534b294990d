//! Fixtures shared by the benchmarks.

use protoforge::{parse_spec, FullSpec};

pub const EXAMPLE: &str = "delta 0.35; cars A B; snd A->B(d) . (ack B->A : 0.7 | nack B->A : 0.8)";

pub fn example() -> FullSpec {
    parse_spec(EXAMPLE).expect("the example parses")
}
