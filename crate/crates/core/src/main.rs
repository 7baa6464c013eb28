fn main() {
    std::process::exit(rift::cli::run());
}
