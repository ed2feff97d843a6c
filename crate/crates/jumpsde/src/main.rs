fn main() {
    std::process::exit(jumpsde::cli::run());
}
