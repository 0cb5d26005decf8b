fn main() {
    std::process::exit(ungraph::cli::run());
}
