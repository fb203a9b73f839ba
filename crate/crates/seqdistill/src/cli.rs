//! Placeholder.
pub fn run_cli(_args: Vec<String>) -> i32 {
    0
}
