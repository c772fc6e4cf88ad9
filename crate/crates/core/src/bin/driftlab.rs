fn main() {
    std::process::exit(driftlab::cli::main_with_args(std::env::args_os()));
}
