fn main() {
    std::process::exit(bridge_pet::cli::run(std::env::args_os()));
}
