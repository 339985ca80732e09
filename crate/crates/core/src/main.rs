fn main() {
    std::process::exit(gdtre::cli::run_from_env());
}
