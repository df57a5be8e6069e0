fn main() {
    std::process::exit(elit::cli::run());
}
