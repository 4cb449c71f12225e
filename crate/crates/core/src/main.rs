fn main() {
    std::process::exit(langevin_lab::cli::main_with_args(std::env::args_os()));
}
