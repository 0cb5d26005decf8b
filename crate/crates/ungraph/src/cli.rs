//! Command-line entry point.

pub fn run() -> i32 {
    0
}
