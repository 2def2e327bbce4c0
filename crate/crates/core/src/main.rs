fn main() {
    std::process::exit(rrl_core::cli::main_with_args(std::env::args_os()));
}
