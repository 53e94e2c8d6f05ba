fn main() {
    std::process::exit(depi::cli::main_with_args(std::env::args_os()));
}
