fn main() {
    std::process::exit(hnvoc::cli::run());
}
