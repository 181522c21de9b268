fn main() {
    std::process::exit(cvar_sgd::cli::main_with_args(std::env::args_os()));
}
