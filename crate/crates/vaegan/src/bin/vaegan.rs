fn main() {
    std::process::exit(vaegan::cli::run());
}
